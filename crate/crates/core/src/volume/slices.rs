use super::{Dims, LabelVolume, MultiModalVolume, View};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One 2-D slice: image `[4, h, w]`, label plane (label values, row-major)
/// and its index along the view's slicing axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub index: usize,
    pub image: Tensor,
    pub labels: Option<Vec<u8>>,
}

impl Slice {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Image plane `index` of `vol` as a `[4, h, w]` tensor.
pub fn slice_image(vol: &MultiModalVolume, view: View, index: usize) -> Result<Tensor> {
    let dims = vol.dims();
    if index >= view.slice_count(dims) {
        return Err(Error::InvalidArgument(format!(
            "{view} slice {index} out of range for dims {dims:?}"
        )));
    }
    let (h, w) = view.slice_shape(dims);
    let mut data = Vec::with_capacity(4 * h * w);
    for m in 0..4 {
        let plane = vol.modality(m);
        for row in 0..h {
            for col in 0..w {
                data.push(f64::from(plane[view.voxel(dims, index, row, col)]));
            }
        }
    }
    Tensor::new(vec![4, h, w], data)
}

pub fn slice_labels(labels: &LabelVolume, view: View, index: usize) -> Vec<u8> {
    let dims = labels.dims();
    let (h, w) = view.slice_shape(dims);
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            out.push(labels.labels()[view.voxel(dims, index, row, col)]);
        }
    }
    out
}

/// All slices of `vol` along `view`, in index order.
pub fn extract_slices(vol: &MultiModalVolume, labels: Option<&LabelVolume>, view: View) -> Result<Vec<Slice>> {
    if let Some(l) = labels {
        if l.dims() != vol.dims() {
            return Err(Error::shape("extract_slices", &vol.dims(), &l.dims()));
        }
    }
    (0..view.slice_count(vol.dims()))
        .map(|index| {
            Ok(Slice {
                index,
                image: slice_image(vol, view, index)?,
                labels: labels.map(|l| slice_labels(l, view, index)),
            })
        })
        .collect()
}

fn check_complete(slices: &[Slice], view: View, dims: Dims) -> Result<()> {
    let count = view.slice_count(dims);
    let (h, w) = view.slice_shape(dims);
    if slices.len() != count {
        return Err(Error::InvalidArgument(format!(
            "{view} reassembly needs {count} slices, got {}",
            slices.len()
        )));
    }
    let mut seen = vec![false; count];
    for s in slices {
        if s.index >= count || std::mem::replace(&mut seen[s.index], true) {
            return Err(Error::InvalidArgument(format!(
                "duplicate or out-of-range slice index {}",
                s.index
            )));
        }
        if s.image.shape() != [4, h, w] {
            return Err(Error::shape("reassemble", &[4, h, w], s.image.shape()));
        }
    }
    Ok(())
}

/// Inverse of [`extract_slices`] for the image data.
pub fn reassemble_volume(slices: &[Slice], view: View, dims: Dims, case_id: &str) -> Result<MultiModalVolume> {
    check_complete(slices, view, dims)?;
    let n: usize = dims.iter().product();
    let (h, w) = view.slice_shape(dims);
    let mut voxels = vec![0.0f32; 4 * n];
    for s in slices {
        let d = s.image.data();
        for m in 0..4 {
            for row in 0..h {
                for col in 0..w {
                    voxels[m * n + view.voxel(dims, s.index, row, col)] = d[(m * h + row) * w + col] as f32;
                }
            }
        }
    }
    MultiModalVolume::new(case_id, dims, voxels)
}

/// Inverse of [`extract_slices`] for the label planes.
pub fn reassemble_labels(slices: &[Slice], view: View, dims: Dims) -> Result<LabelVolume> {
    check_complete(slices, view, dims)?;
    let (h, w) = view.slice_shape(dims);
    let mut labels = vec![0u8; dims.iter().product()];
    for s in slices {
        let plane = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("slice {} has no labels", s.index)))?;
        for row in 0..h {
            for col in 0..w {
                labels[view.voxel(dims, s.index, row, col)] = plane[row * w + col];
            }
        }
    }
    LabelVolume::new(dims, labels)
}
