use serde::{Deserialize, Serialize};

use super::{Dims, MultiModalVolume, MODALITIES};
use crate::error::{Error, Result};
use crate::stats::percentile_sorted;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Fraction of intensities clamped at each end.
    pub clip_fraction: f64,
    /// Include zero (background) voxels in clipping and normalization
    /// statistics.
    pub include_background: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clip_fraction: 0.01,
            include_background: false,
        }
    }
}

/// Hook for inhomogeneity correction applied before clipping.
pub trait BiasFieldCorrection {
    fn correct(&self, modality: &mut [f32], dims: Dims);
}

/// No correction.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCorrection;

impl BiasFieldCorrection for IdentityCorrection {
    fn correct(&self, _modality: &mut [f32], _dims: Dims) {}
}

fn in_stats(v: f32, include_background: bool) -> bool {
    include_background || v != 0.0
}

/// Clamps each modality to its `[fraction, 1 − fraction]` nearest-rank
/// percentiles over brain voxels.
pub fn clip_intensities(vol: &MultiModalVolume, fraction: f64, include_background: bool) -> Result<MultiModalVolume> {
    if !(0.0..0.5).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "clip fraction must lie in [0, 0.5), got {fraction}"
        )));
    }
    let mut out = vol.clone();
    for m in 0..MODALITIES.len() {
        let data = out.modality_mut(m);
        let mut sorted: Vec<f64> = data
            .iter()
            .filter(|&&v| in_stats(v, include_background))
            .map(|&v| f64::from(v))
            .collect();
        sorted.sort_by(f64::total_cmp);
        let (Some(lo), Some(hi)) = (
            percentile_sorted(&sorted, fraction),
            percentile_sorted(&sorted, 1.0 - fraction),
        ) else {
            continue;
        };
        let (lo, hi) = (lo as f32, hi as f32);
        for v in data.iter_mut().filter(|v| in_stats(**v, include_background)) {
            *v = v.clamp(lo, hi);
        }
    }
    Ok(out)
}

/// Zero mean, unit variance per modality over brain voxels; background
/// voxels are set to zero.
pub fn z_normalize(vol: &MultiModalVolume, include_background: bool) -> Result<MultiModalVolume> {
    let mut out = vol.clone();
    for (m, name) in MODALITIES.iter().enumerate() {
        let data = out.modality_mut(m);
        let (mut n, mut sum) = (0usize, 0.0f64);
        for &v in data.iter().filter(|v| in_stats(**v, include_background)) {
            n += 1;
            sum += f64::from(v);
        }
        if n == 0 {
            return Err(Error::InvalidArgument(format!(
                "case {}: modality {name} has no brain voxels",
                vol.case_id
            )));
        }
        let mean = sum / n as f64;
        let var = data
            .iter()
            .filter(|v| in_stats(**v, include_background))
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        if !(var > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "case {}: modality {name} has zero variance over brain voxels",
                vol.case_id
            )));
        }
        let inv_std = 1.0 / var.sqrt();
        for v in data.iter_mut() {
            *v = if in_stats(*v, include_background) {
                ((f64::from(*v) - mean) * inv_std) as f32
            } else {
                0.0
            };
        }
    }
    Ok(out)
}

/// Bias-field hook, percentile clipping, then z-normalization.
pub fn preprocess(
    vol: &MultiModalVolume,
    cfg: &PreprocessConfig,
    correction: &dyn BiasFieldCorrection,
) -> Result<MultiModalVolume> {
    let mut corrected = vol.clone();
    let dims = vol.dims();
    for m in 0..MODALITIES.len() {
        correction.correct(corrected.modality_mut(m), dims);
    }
    let clipped = clip_intensities(&corrected, cfg.clip_fraction, cfg.include_background)?;
    z_normalize(&clipped, cfg.include_background)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn volume_from(values: Vec<f32>, dims: Dims) -> MultiModalVolume {
        MultiModalVolume::from_modalities("t", dims, [values.clone(), values.clone(), values.clone(), values]).unwrap()
    }

    fn random_brain(seed: u64) -> MultiModalVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [6, 5, 4];
        let mods: [Vec<f32>; 4] = std::array::from_fn(|m| {
            (0..120)
                .map(|i| {
                    if i % 7 == 0 {
                        0.0
                    } else {
                        rng.gen_range(1.0..100.0) + 20.0 * m as f32
                    }
                })
                .collect()
        });
        MultiModalVolume::from_modalities("r", dims, mods).unwrap()
    }

    #[test]
    fn constant_volume_unchanged_by_clipping() {
        let v = volume_from(vec![3.0; 24], [2, 3, 4]);
        assert_eq!(clip_intensities(&v, 0.01, false).unwrap(), v);
    }

    #[test]
    fn clip_one_to_hundred_matches_sorted_list_oracle() {
        let values: Vec<f32> = (1..=100).map(|v| v as f32).collect();
        let v = volume_from(values.clone(), [10, 10, 1]);
        let out = clip_intensities(&v, 0.01, false).unwrap();
        // oracle: nearest-rank positions ⌈0.01·100⌉ = 1 and ⌈0.99·100⌉ = 99
        let mut sorted = values.clone();
        sorted.sort_by(f32::total_cmp);
        let (lo, hi) = (sorted[0], sorted[98]);
        assert_eq!((lo, hi), (1.0, 99.0));
        let m = out.modality(0);
        assert_eq!(m.iter().cloned().fold(f32::INFINITY, f32::min), lo);
        assert_eq!(m.iter().cloned().fold(f32::NEG_INFINITY, f32::max), hi);
        assert_eq!(m.iter().filter(|&&x| x == 99.0).count(), 2);
    }

    #[test]
    fn zero_fraction_is_identity() {
        let v = random_brain(1);
        assert_eq!(clip_intensities(&v, 0.0, false).unwrap(), v);
        assert!(clip_intensities(&v, 0.5, false).is_err());
    }

    #[test]
    fn normalized_statistics_match_direct_recomputation() {
        let v = random_brain(2);
        let out = z_normalize(&v, false).unwrap();
        for m in 0..4 {
            let brain: Vec<f64> = v
                .modality(m)
                .iter()
                .zip(out.modality(m))
                .filter(|(orig, _)| **orig != 0.0)
                .map(|(_, n)| f64::from(*n))
                .collect();
            let mean = brain.iter().sum::<f64>() / brain.len() as f64;
            let var = brain.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / brain.len() as f64;
            assert!(mean.abs() <= 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "var {var}");
            for (orig, n) in v.modality(m).iter().zip(out.modality(m)) {
                if *orig == 0.0 {
                    assert_eq!(*n, 0.0);
                }
            }
        }
    }

    #[test]
    fn normalization_is_shift_invariant_and_idempotent() {
        let v = random_brain(3);
        let mut shifted = v.clone();
        for m in 0..4 {
            for x in shifted.modality_mut(m).iter_mut().filter(|x| **x != 0.0) {
                *x += 10.0;
            }
        }
        let a = z_normalize(&v, false).unwrap();
        let b = z_normalize(&shifted, false).unwrap();
        for (x, y) in a.voxels().iter().zip(b.voxels()) {
            assert!((x - y).abs() <= 1e-5);
        }
        let again = z_normalize(&a, false).unwrap();
        for (x, y) in a.voxels().iter().zip(again.voxels()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_variance_rejected() {
        let v = volume_from(vec![5.0; 8], [2, 2, 2]);
        assert!(z_normalize(&v, false).is_err());
    }

    #[test]
    fn pipeline_is_idempotent_after_first_pass() {
        let v = random_brain(4);
        let cfg = PreprocessConfig::default();
        let once = preprocess(&v, &cfg, &IdentityCorrection).unwrap();
        let twice = preprocess(&once, &cfg, &IdentityCorrection).unwrap();
        for (x, y) in once.voxels().iter().zip(twice.voxels()) {
            assert!((x - y).abs() <= 1e-5);
        }
    }
}
