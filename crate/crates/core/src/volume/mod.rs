//! Multi-modal MRI volumes, labels, preprocessing, slicing and dataset
//! utilities.
//!
//! Volumes use NIfTI axis order: `dims = [nx, ny, nz]` with `x` varying
//! fastest in memory (`index = x + nx·(y + ny·z)`). Axial slices are the
//! `x × y` planes indexed by `z`; coronal slices are the `x × z` planes
//! indexed by `y`.

mod augment;
mod kfold;
pub mod mvol;
pub mod nifti;
mod phantom;
mod preprocess;
mod slices;
mod subregion;

use serde::{Deserialize, Serialize};

pub use augment::{augment, flip_horizontal, flip_vertical, Flips};
pub use kfold::{kfold_split, Fold};
pub use phantom::{generate_phantom, PhantomConfig, MIN_PHANTOM_EXTENT};
pub use preprocess::{
    clip_intensities, preprocess, z_normalize, BiasFieldCorrection, IdentityCorrection, PreprocessConfig,
};
pub use slices::{extract_slices, reassemble_labels, reassemble_volume, slice_image, slice_labels, Slice};
pub use subregion::{to_subregions, SubRegion, SubRegionMasks};

use crate::error::{Error, Result};

pub const MODALITIES: [&str; 4] = ["t1", "t1c", "t2", "flair"];

/// Legal label values: background, necrosis, edema, enhancing.
pub const LABEL_VALUES: [u8; 4] = [0, 1, 2, 4];

/// Maps a label value to its class index, `None` for illegal values.
pub fn class_index(label: u8) -> Option<u8> {
    LABEL_VALUES.iter().position(|&v| v == label).map(|i| i as u8)
}

/// Maps a class index back to its label value.
pub fn label_value(class: u8) -> u8 {
    LABEL_VALUES[class as usize]
}

pub type Dims = [usize; 3];

fn voxel_count(dims: Dims) -> usize {
    dims.iter().product()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Axial,
    Coronal,
}

impl View {
    pub const ALL: [View; 2] = [View::Axial, View::Coronal];

    pub fn name(self) -> &'static str {
        match self {
            View::Axial => "axial",
            View::Coronal => "coronal",
        }
    }

    /// Volume axis the slices are indexed by.
    pub fn axis(self) -> usize {
        match self {
            View::Axial => 2,
            View::Coronal => 1,
        }
    }

    pub fn slice_count(self, dims: Dims) -> usize {
        dims[self.axis()]
    }

    /// `(height, width)` of each slice.
    pub fn slice_shape(self, dims: Dims) -> (usize, usize) {
        match self {
            View::Axial => (dims[0], dims[1]),
            View::Coronal => (dims[0], dims[2]),
        }
    }

    /// Volume index of in-plane position `(row, col)` on slice `index`.
    pub fn voxel(self, dims: Dims, index: usize, row: usize, col: usize) -> usize {
        let (x, y, z) = match self {
            View::Axial => (row, col, index),
            View::Coronal => (row, index, col),
        };
        x + dims[0] * (y + dims[1] * z)
    }
}

impl std::str::FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(View::Axial),
            "coronal" => Ok(View::Coronal),
            "sagittal" => Err(Error::Unsupported("sagittal view".into())),
            other => Err(Error::InvalidArgument(format!("unknown view {other:?}"))),
        }
    }
}

impl std::fmt::Display for View {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Hgg,
    Lgg,
}

/// Four co-registered modalities (T1, T1c, T2, Flair) of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    pub case_id: String,
    dims: Dims,
    voxels: Vec<f32>,
}

impl MultiModalVolume {
    /// `voxels` holds the four modalities back to back.
    pub fn new(case_id: impl Into<String>, dims: Dims, voxels: Vec<f32>) -> Result<Self> {
        let n = voxel_count(dims);
        if n == 0 || voxels.len() != 4 * n {
            return Err(Error::InvalidArgument(format!(
                "volume of dims {dims:?} needs {} voxels, got {}",
                4 * n,
                voxels.len()
            )));
        }
        Ok(Self {
            case_id: case_id.into(),
            dims,
            voxels,
        })
    }

    pub fn from_modalities(case_id: impl Into<String>, dims: Dims, modalities: [Vec<f32>; 4]) -> Result<Self> {
        let n = voxel_count(dims);
        if modalities.iter().any(|m| m.len() != n) {
            return Err(Error::InvalidArgument(format!(
                "all modalities must have {n} voxels for dims {dims:?}"
            )));
        }
        Self::new(case_id, dims, modalities.concat())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_count(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn modality(&self, m: usize) -> &[f32] {
        let n = self.voxel_count();
        &self.voxels[m * n..(m + 1) * n]
    }

    pub fn modality_mut(&mut self, m: usize) -> &mut [f32] {
        let n = self.voxel_count();
        &mut self.voxels[m * n..(m + 1) * n]
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }
}

/// Integer labels with values in `{0, 1, 2, 4}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    dims: Dims,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self> {
        if voxel_count(dims) == 0 || labels.len() != voxel_count(dims) {
            return Err(Error::InvalidArgument(format!(
                "label volume of dims {dims:?} got {} labels",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| class_index(l).is_none()) {
            return Err(Error::InvalidArgument(format!("illegal label value {bad}")));
        }
        Ok(Self { dims, labels })
    }

    pub fn background(dims: Dims) -> Self {
        Self {
            dims,
            labels: vec![0; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Class indices `0..4` per voxel.
    pub fn classes(&self) -> Vec<u8> {
        self.labels
            .iter()
            .map(|&l| class_index(l).expect("validated label"))
            .collect()
    }
}

/// A case with its labels and grade.
#[derive(Clone, Debug)]
pub struct Case {
    pub volume: MultiModalVolume,
    pub labels: LabelVolume,
    pub grade: Grade,
}

impl Case {
    pub fn id(&self) -> &str {
        &self.volume.case_id
    }
}
