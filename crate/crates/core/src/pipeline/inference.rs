//! Slice-wise prediction, fold ensembling and multi-view fusion.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::checkpoint::Checkpoint;
use crate::model::{crop, pad_to_valid, predict};
use crate::tensor::serialize::{Blob, BlobData};
use crate::tensor::Tensor;
use crate::volume::{label_value, slice_image, Dims, LabelVolume, MultiModalVolume, View};

/// Slices per forward pass during inference.
const INFERENCE_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Softmax average over the fold models of one view.
    ViewEnsemble,
    /// Voxel-wise mean of two view ensembles.
    Fused,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub views: Vec<View>,
    pub folds: Vec<Option<usize>>,
    pub stage: Stage,
}

/// Per-voxel class probabilities, stored class-major (`[C][voxel]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume {
    pub case_id: String,
    dims: Dims,
    classes: usize,
    data: Vec<f32>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ProbabilityManifest {
    format: String,
    version: u32,
    case_id: String,
    dims: Dims,
    classes: usize,
    provenance: Provenance,
}

pub const PROBABILITY_MANIFEST: &str = "probabilities.json";
pub const PROBABILITY_BLOB: &str = "probabilities.tnsr";

impl ProbabilityVolume {
    pub fn new(
        case_id: impl Into<String>,
        dims: Dims,
        classes: usize,
        data: Vec<f32>,
        provenance: Provenance,
    ) -> Result<Self> {
        let n: usize = dims.iter().product();
        if classes < 2 || data.len() != classes * n || n == 0 {
            return Err(Error::shape(
                "ProbabilityVolume",
                &[classes, dims[0], dims[1], dims[2]],
                &[data.len()],
            ));
        }
        Ok(Self {
            case_id: case_id.into(),
            dims,
            classes,
            data,
            provenance,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Probability vector of voxel `i`.
    pub fn at(&self, i: usize) -> Vec<f32> {
        let n = self.voxel_count();
        (0..self.classes).map(|c| self.data[c * n + i]).collect()
    }

    /// Largest deviation of a per-voxel sum from 1, and whether any entry
    /// is negative or non-finite.
    pub fn simplex_error(&self) -> (f64, bool) {
        let n = self.voxel_count();
        let mut worst = 0.0f64;
        let mut invalid = false;
        for i in 0..n {
            let mut s = 0.0f64;
            for c in 0..self.classes {
                let p = self.data[c * n + i];
                invalid |= !(p >= 0.0) || !p.is_finite();
                s += f64::from(p);
            }
            worst = worst.max((s - 1.0).abs());
        }
        (worst, invalid)
    }

    /// Per-voxel argmax (lowest class on ties) mapped to label values.
    pub fn to_labels(&self) -> Result<LabelVolume> {
        let n = self.voxel_count();
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.data[c * n + i] > self.data[best * n + i] {
                        best = c;
                    }
                }
                label_value(best as u8)
            })
            .collect();
        LabelVolume::new(self.dims, labels)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let [nx, ny, nz] = self.dims;
        let blob = Blob::new(vec![self.classes, nz, ny, nx], BlobData::F32(self.data.clone()))?;
        fsutil::write_atomic(&dir.join(PROBABILITY_BLOB), &blob.encode())?;
        fsutil::write_json(
            &dir.join(PROBABILITY_MANIFEST),
            &ProbabilityManifest {
                format: "probabilities".into(),
                version: 1,
                case_id: self.case_id.clone(),
                dims: self.dims,
                classes: self.classes,
                provenance: self.provenance.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: ProbabilityManifest = fsutil::read_json(&dir.join(PROBABILITY_MANIFEST))?;
        if m.format != "probabilities" || m.version != 1 {
            return Err(Error::format(
                "probabilities",
                format!("unexpected header {} v{}", m.format, m.version),
            ));
        }
        let bytes = fsutil::read(&dir.join(PROBABILITY_BLOB))?;
        let (blob, used) = Blob::decode(&bytes)?;
        let [nx, ny, nz] = m.dims;
        if used != bytes.len() || blob.shape != [m.classes, nz, ny, nx] {
            return Err(Error::format("probabilities", "blob does not match its manifest"));
        }
        let BlobData::F32(data) = blob.data else {
            return Err(Error::format("probabilities", "expected f32 data"));
        };
        Self::new(m.case_id, m.dims, m.classes, data, m.provenance)
    }
}

fn check_models(models: &[Checkpoint], view: View) -> Result<usize> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("prediction needs at least one model".into()))?;
    let classes = first.spec.num_classes;
    for m in models {
        if m.spec.num_classes != classes {
            return Err(Error::InvalidArgument(
                "models disagree on the number of classes".into(),
            ));
        }
        if m.spec.in_channels != 4 {
            return Err(Error::InvalidArgument(format!(
                "model expects {} input channels",
                m.spec.in_channels
            )));
        }
        if let Some(v) = m.meta.view {
            if v != view {
                return Err(Error::InvalidArgument(format!(
                    "model trained on {v} slices used for {view}"
                )));
            }
        }
    }
    Ok(classes)
}

/// Softmax of a batch of `[4, h, w]` slices averaged over `models`:
/// returns `[B, C, h, w]`.
pub fn predict_slices(models: &[Checkpoint], slices: &[Tensor]) -> Result<Tensor> {
    let stacked = Tensor::stack_batch(
        &slices
            .iter()
            .map(|s| {
                let shape = [1, s.shape()[0], s.shape()[1], s.shape()[2]];
                s.clone().reshape(&shape)
            })
            .collect::<Result<Vec<_>>>()?,
    )?;
    let mut sum: Option<Tensor> = None;
    for m in models {
        let (padded, record) = pad_to_valid(&stacked, m.spec.spatial_multiple())?;
        let p = crop(&predict(&m.params, &m.spec, &padded)?, &record)?;
        match sum.as_mut() {
            Some(s) => s.add_assign(&p)?,
            None => sum = Some(p),
        }
    }
    let k = models.len() as f64;
    Ok(sum.expect("at least one model").map(|v| v / k))
}

/// Predicts every slice of `volume` along `view` with each model, averages
/// the softmax outputs and reassembles a probability volume.
pub fn predict_volume(models: &[Checkpoint], volume: &MultiModalVolume, view: View) -> Result<ProbabilityVolume> {
    let classes = check_models(models, view)?;
    let dims = volume.dims();
    let count = view.slice_count(dims);
    let (h, w) = view.slice_shape(dims);
    let n: usize = dims.iter().product();
    let starts: Vec<usize> = (0..count).step_by(INFERENCE_BATCH).collect();
    let chunks: Vec<(usize, Tensor)> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + INFERENCE_BATCH).min(count);
            let slices = (start..end)
                .map(|i| slice_image(volume, view, i))
                .collect::<Result<Vec<_>>>()?;
            Ok((start, predict_slices(models, &slices)?))
        })
        .collect::<Result<_>>()?;
    let mut data = vec![0.0f32; classes * n];
    for (start, probs) in chunks {
        let d = probs.data();
        for b in 0..probs.shape()[0] {
            for c in 0..classes {
                let plane = &d[(b * classes + c) * h * w..(b * classes + c + 1) * h * w];
                for row in 0..h {
                    for col in 0..w {
                        data[c * n + view.voxel(dims, start + b, row, col)] = plane[row * w + col] as f32;
                    }
                }
            }
        }
    }
    ProbabilityVolume::new(
        volume.case_id.clone(),
        dims,
        classes,
        data,
        Provenance {
            views: vec![view],
            folds: models.iter().map(|m| m.meta.fold).collect(),
            stage: Stage::ViewEnsemble,
        },
    )
}

/// Voxel-wise mean of two probability volumes and its argmax labels.
pub fn fuse_views(axial: &ProbabilityVolume, coronal: &ProbabilityVolume) -> Result<(ProbabilityVolume, LabelVolume)> {
    if axial.dims != coronal.dims || axial.classes != coronal.classes {
        return Err(Error::shape(
            "fuse_views",
            &[axial.classes, axial.dims[0], axial.dims[1], axial.dims[2]],
            &[coronal.classes, coronal.dims[0], coronal.dims[1], coronal.dims[2]],
        ));
    }
    if axial.case_id != coronal.case_id {
        return Err(Error::InvalidArgument(format!(
            "cannot fuse case {} with case {}",
            axial.case_id, coronal.case_id
        )));
    }
    let data = axial
        .data
        .iter()
        .zip(&coronal.data)
        .map(|(&a, &c)| ((f64::from(a) + f64::from(c)) / 2.0) as f32)
        .collect();
    let mut views = axial.provenance.views.clone();
    views.extend(&coronal.provenance.views);
    let mut folds = axial.provenance.folds.clone();
    folds.extend(&coronal.provenance.folds);
    let fused = ProbabilityVolume::new(
        axial.case_id.clone(),
        axial.dims,
        axial.classes,
        data,
        Provenance {
            views,
            folds,
            stage: Stage::Fused,
        },
    )?;
    let labels = fused.to_labels()?;
    Ok((fused, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, NetworkSpec, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn provenance(view: View) -> Provenance {
        Provenance {
            views: vec![view],
            folds: vec![Some(0)],
            stage: Stage::ViewEnsemble,
        }
    }

    fn random_probs(dims: Dims, seed: u64, view: View) -> ProbabilityVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        let mut data = vec![0.0f32; 4 * n];
        for i in 0..n {
            let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for c in 0..4 {
                data[c * n + i] = (raw[c] / s) as f32;
            }
        }
        ProbabilityVolume::new("c", dims, 4, data, provenance(view)).unwrap()
    }

    fn tiny_model(seed: u64) -> Checkpoint {
        let spec = NetworkSpec {
            depth: 2,
            se_reduction: 4,
            ..NetworkSpec::with_width(4, Variant::MinorModsPlusAttention)
        };
        let params = build(&spec, seed).unwrap();
        Checkpoint::initial(spec, seed, params)
    }

    fn random_volume(dims: Dims, seed: u64) -> MultiModalVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let voxels = (0..4 * dims.iter().product::<usize>())
            .map(|_| rng.gen_range(-2.0f32..2.0))
            .collect();
        MultiModalVolume::new("c", dims, voxels).unwrap()
    }

    #[test]
    fn fusion_arithmetic_example() {
        let mk = |p: [f32; 4], v| ProbabilityVolume::new("c", [1, 1, 1], 4, p.to_vec(), provenance(v)).unwrap();
        let (fused, labels) = fuse_views(
            &mk([0.6, 0.4, 0.0, 0.0], View::Axial),
            &mk([0.2, 0.8, 0.0, 0.0], View::Coronal),
        )
        .unwrap();
        let p = fused.at(0);
        assert!((p[0] - 0.4).abs() < 1e-7 && (p[1] - 0.6).abs() < 1e-7);
        assert_eq!(labels.labels(), &[1]);
        assert_eq!(fused.provenance.stage, Stage::Fused);
    }

    #[test]
    fn fusing_a_volume_with_itself_keeps_labels() {
        let p = random_probs([5, 4, 3], 1, View::Axial);
        let (fused, labels) = fuse_views(&p, &p).unwrap();
        assert_eq!(fused.data(), p.data());
        assert_eq!(labels, p.to_labels().unwrap());
    }

    #[test]
    fn fusion_rejects_mismatched_dims() {
        assert!(fuse_views(
            &random_probs([2, 2, 2], 0, View::Axial),
            &random_probs([2, 2, 3], 0, View::Coronal)
        )
        .is_err());
    }

    #[test]
    fn predicted_volume_is_a_distribution_per_voxel() {
        // 10 × 12 planes are padded to 12 × 12 and cropped back.
        let vol = random_volume([10, 12, 9], 2);
        for view in View::ALL {
            let p = predict_volume(&[tiny_model(1)], &vol, view).unwrap();
            let (err, invalid) = p.simplex_error();
            assert!(err <= 1e-5 && !invalid, "{view}: {err}");
            assert_eq!(p.dims(), vol.dims());
        }
    }

    #[test]
    fn duplicate_models_average_to_one() {
        let vol = random_volume([8, 8, 5], 3);
        let m = tiny_model(4);
        let one = predict_volume(std::slice::from_ref(&m), &vol, View::Axial).unwrap();
        let two = predict_volume(&[m.clone(), m], &vol, View::Axial).unwrap();
        assert_eq!(one.data(), two.data());
    }

    #[test]
    fn identical_slices_give_identical_planes() {
        let dims = [8, 8, 6];
        let n = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plane: Vec<f32> = (0..4 * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let mut voxels = vec![0.0f32; 4 * n * 6];
        for m in 0..4 {
            for z in 0..6 {
                voxels[m * n * 6 + z * n..m * n * 6 + (z + 1) * n].copy_from_slice(&plane[m * n..(m + 1) * n]);
            }
        }
        let vol = MultiModalVolume::new("c", dims, voxels).unwrap();
        let p = predict_volume(&[tiny_model(6)], &vol, View::Axial).unwrap();
        for c in 0..4 {
            let first = &p.data()[c * n * 6..c * n * 6 + n];
            for z in 1..6 {
                assert_eq!(&p.data()[c * n * 6 + z * n..c * n * 6 + (z + 1) * n], first);
            }
        }
    }

    #[test]
    fn view_mismatch_rejected() {
        let mut m = tiny_model(1);
        m.meta.view = Some(View::Coronal);
        assert!(predict_volume(&[m], &random_volume([8, 8, 8], 0), View::Axial).is_err());
        assert!(predict_volume(&[], &random_volume([8, 8, 8], 0), View::Axial).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = random_probs([3, 4, 5], 9, View::Coronal);
        p.save(dir.path()).unwrap();
        assert_eq!(ProbabilityVolume::load(dir.path()).unwrap(), p);
    }
}
