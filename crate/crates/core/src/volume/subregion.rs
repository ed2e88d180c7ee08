use serde::{Deserialize, Serialize};

use super::{class_index, Dims, LabelVolume};
use crate::error::{Error, Result};

/// Evaluated tumor sub-regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubRegion {
    /// Whole tumor: labels {1, 2, 4}.
    #[serde(rename = "WT")]
    WholeTumor,
    /// Tumor core: labels {1, 4}.
    #[serde(rename = "TC")]
    TumorCore,
    /// Enhancing tumor: label {4}.
    #[serde(rename = "ET")]
    EnhancingTumor,
}

impl SubRegion {
    pub const ALL: [SubRegion; 3] = [SubRegion::WholeTumor, SubRegion::TumorCore, SubRegion::EnhancingTumor];

    pub fn abbrev(self) -> &'static str {
        match self {
            SubRegion::WholeTumor => "WT",
            SubRegion::TumorCore => "TC",
            SubRegion::EnhancingTumor => "ET",
        }
    }

    pub fn contains(self, label: u8) -> bool {
        match self {
            SubRegion::WholeTumor => matches!(label, 1 | 2 | 4),
            SubRegion::TumorCore => matches!(label, 1 | 4),
            SubRegion::EnhancingTumor => label == 4,
        }
    }
}

/// Binary WT/TC/ET masks; `ET ⊆ TC ⊆ WT` always holds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubRegionMasks {
    pub dims: Dims,
    pub wt: Vec<bool>,
    pub tc: Vec<bool>,
    pub et: Vec<bool>,
}

impl SubRegionMasks {
    pub fn mask(&self, region: SubRegion) -> &[bool] {
        match region {
            SubRegion::WholeTumor => &self.wt,
            SubRegion::TumorCore => &self.tc,
            SubRegion::EnhancingTumor => &self.et,
        }
    }

    /// Validating variant for raw label values.
    pub fn from_raw(dims: Dims, labels: &[u8]) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| class_index(l).is_none()) {
            return Err(Error::InvalidArgument(format!("illegal label value {bad}")));
        }
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::shape("sub-region masks", &dims, &[labels.len()]));
        }
        let m = |r: SubRegion| labels.iter().map(|&l| r.contains(l)).collect();
        Ok(Self {
            dims,
            wt: m(SubRegion::WholeTumor),
            tc: m(SubRegion::TumorCore),
            et: m(SubRegion::EnhancingTumor),
        })
    }
}

pub fn to_subregions(labels: &LabelVolume) -> SubRegionMasks {
    SubRegionMasks::from_raw(labels.dims(), labels.labels()).expect("label volume is validated")
}
