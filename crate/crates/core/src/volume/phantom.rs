//! Synthetic multi-modal tumor phantoms.
//!
//! A phantom is a skull-stripped ellipsoidal "brain" with smooth intensity
//! inhomogeneity and voxel noise, containing a nested tumor: an edema
//! envelope around a core that is split into a necrotic center and an
//! enhancing rim (high-grade) or left non-enhancing (low-grade).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dims, Grade, LabelVolume, MultiModalVolume};
use crate::error::{Error, Result};

pub const MIN_PHANTOM_EXTENT: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub grade: Grade,
    pub seed: u64,
}

// T1, T1c, T2, Flair
const TISSUE: [f32; 4] = [100.0, 110.0, 80.0, 90.0];
const NECROSIS: [f32; 4] = [60.0, 70.0, 160.0, 110.0];
const EDEMA: [f32; 4] = [85.0, 95.0, 150.0, 170.0];
const ENHANCING: [f32; 4] = [95.0, 200.0, 120.0, 140.0];
const NOISE_STD: f32 = 5.0;

/// Sum of a few random plane waves in `[-1, 1]`.
struct SmoothField {
    waves: Vec<([f64; 3], f64)>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, count: usize, min_wavelength: f64, max_wavelength: f64) -> Self {
        let waves = (0..count)
            .map(|_| {
                let dir: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-6);
                let k = std::f64::consts::TAU / rng.gen_range(min_wavelength..max_wavelength);
                let dir = dir.map(|d| d / norm * k);
                (dir, rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|(k, phase)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos())
            .sum();
        s / self.waves.len() as f64
    }
}

#[derive(Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalized radial distance; `< 1` inside.
    fn dist(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Generates one phantom case; deterministic in `seed`.
pub fn generate_phantom(seed: u64, dims: Dims, grade: Grade) -> Result<(MultiModalVolume, LabelVolume)> {
    if dims.iter().any(|&d| d < MIN_PHANTOM_EXTENT) {
        return Err(Error::InvalidArgument(format!(
            "phantom extents must be >= {MIN_PHANTOM_EXTENT}, got {dims:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = dims.map(|d| d as f64);
    let brain = Ellipsoid {
        center: std::array::from_fn(|i| ext[i] / 2.0 + rng.gen_range(-0.03..0.03) * ext[i]),
        radii: std::array::from_fn(|i| ext[i] * rng.gen_range(0.38..0.44)),
    };
    let edema_scale = match grade {
        Grade::Hgg => 0.16..0.24,
        Grade::Lgg => 0.12..0.19,
    };
    let edema = Ellipsoid {
        center: std::array::from_fn(|i| brain.center[i] + rng.gen_range(-0.35..0.35) * brain.radii[i] * 0.6),
        radii: std::array::from_fn(|i| ext[i] * rng.gen_range(edema_scale.clone())),
    };
    let core_ratio = rng.gen_range(0.5..0.65);
    let core = Ellipsoid {
        center: std::array::from_fn(|i| edema.center[i] + rng.gen_range(-0.15..0.15) * edema.radii[i]),
        radii: edema.radii.map(|r| r * core_ratio),
    };
    let necrotic_fraction = rng.gen_range(0.5..0.7);
    let shape_field = SmoothField::new(&mut rng, 5, ext[0] * 0.2, ext[0] * 0.5);
    let bias_field = SmoothField::new(&mut rng, 4, ext[0] * 0.6, ext[0] * 1.5);
    let texture = SmoothField::new(&mut rng, 6, ext[0] * 0.1, ext[0] * 0.3);
    let noise = Normal::new(0.0f32, NOISE_STD).expect("valid std");

    let n: usize = dims.iter().product();
    let mut labels = vec![0u8; n];
    let mut modalities: [Vec<f32>; 4] = std::array::from_fn(|_| vec![0.0; n]);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let idx = x + dims[0] * (y + dims[1] * z);
                let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                if brain.dist(p) >= 1.0 {
                    continue;
                }
                let wobble = 0.12 * shape_field.at(p);
                let label = if core.dist(p) + wobble < 1.0 {
                    match grade {
                        Grade::Hgg if core.dist(p) + wobble >= necrotic_fraction => 4,
                        _ => 1,
                    }
                } else if edema.dist(p) + wobble < 1.0 {
                    2
                } else {
                    0
                };
                labels[idx] = label;
                let base = match label {
                    1 => NECROSIS,
                    2 => EDEMA,
                    4 => ENHANCING,
                    _ => TISSUE,
                };
                let gain = 1.0 + 0.08 * bias_field.at(p) as f32;
                let tex = 1.0 + 0.06 * texture.at(p) as f32;
                for (m, plane) in modalities.iter_mut().enumerate() {
                    let v = base[m] * gain * tex + noise.sample(&mut rng);
                    plane[idx] = v.max(1.0);
                }
            }
        }
    }
    let case_id = format!("phantom-{seed}");
    Ok((
        MultiModalVolume::from_modalities(case_id, dims, modalities)?,
        LabelVolume::new(dims, labels)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::to_subregions;

    #[test]
    fn deterministic_in_seed() {
        let a = generate_phantom(3, [32, 32, 32], Grade::Hgg).unwrap();
        let b = generate_phantom(3, [32, 32, 32], Grade::Hgg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = generate_phantom(4, [32, 32, 32], Grade::Hgg).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn nested_labels_and_tumor_present() {
        for (seed, grade) in [(1, Grade::Hgg), (2, Grade::Lgg), (5, Grade::Hgg)] {
            let (_, labels) = generate_phantom(seed, [40, 36, 32], grade).unwrap();
            let m = to_subregions(&labels);
            for i in 0..m.wt.len() {
                assert!(!m.et[i] || m.tc[i]);
                assert!(!m.tc[i] || m.wt[i]);
            }
            assert!(m.tc.iter().any(|&v| v));
            assert!(m.wt.iter().filter(|&&v| v).count() > m.tc.iter().filter(|&&v| v).count());
            assert_eq!(m.et.iter().any(|&v| v), grade == Grade::Hgg);
        }
    }

    #[test]
    fn flair_brighter_in_edema_than_outside_brain() {
        let (vol, labels) = generate_phantom(9, [48, 48, 48], Grade::Hgg).unwrap();
        let flair = vol.modality(3);
        let mean = |pred: &dyn Fn(usize) -> bool| {
            let v: Vec<f64> = (0..flair.len())
                .filter(|&i| pred(i))
                .map(|i| f64::from(flair[i]))
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let edema = mean(&|i| labels.labels()[i] == 2);
        let outside = mean(&|i| flair[i] == 0.0);
        assert!(edema > outside);
        let tissue = mean(&|i| labels.labels()[i] == 0 && flair[i] != 0.0);
        assert!(edema > tissue * 1.5);
    }

    #[test]
    fn small_dims_rejected() {
        assert!(generate_phantom(0, [31, 64, 64], Grade::Lgg).is_err());
    }
}
