use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Padding applied by [`pad_to_valid`]; [`crop`] undoes it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl CropRecord {
    pub fn is_empty(&self) -> bool {
        self.top + self.bottom + self.left + self.right == 0
    }
}

fn split(extent: usize, multiple: usize) -> (usize, usize) {
    let target = extent.div_ceil(multiple) * multiple;
    let total = target - extent;
    (total / 2, total - total / 2)
}

/// Zero-pads H and W of a `[B, C, H, W]` tensor up to the next multiple of
/// `multiple`, splitting the padding symmetrically with the odd voxel on
/// the high side.
pub fn pad_to_valid(t: &Tensor, multiple: usize) -> Result<(Tensor, CropRecord)> {
    let [b, c, h, w] = t.dims4("pad_to_valid")?;
    if multiple == 0 {
        return Err(Error::InvalidArgument("padding multiple must be positive".into()));
    }
    let (top, bottom) = split(h, multiple);
    let (left, right) = split(w, multiple);
    let record = CropRecord {
        top,
        bottom,
        left,
        right,
    };
    if record.is_empty() {
        return Ok((t.clone(), record));
    }
    let (ph, pw) = (h + top + bottom, w + left + right);
    let mut out = vec![0.0; b * c * ph * pw];
    for (src, dst) in t.data().chunks(h * w).zip(out.chunks_mut(ph * pw)) {
        for y in 0..h {
            let row = (y + top) * pw + left;
            dst[row..row + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    Ok((Tensor::new(vec![b, c, ph, pw], out)?, record))
}

/// Removes the padding described by `record`.
pub fn crop(t: &Tensor, record: &CropRecord) -> Result<Tensor> {
    let [b, c, ph, pw] = t.dims4("crop")?;
    if ph <= record.top + record.bottom || pw <= record.left + record.right {
        return Err(Error::InvalidArgument(format!(
            "cannot crop {record:?} from a {ph}×{pw} plane"
        )));
    }
    if record.is_empty() {
        return Ok(t.clone());
    }
    let h = ph - record.top - record.bottom;
    let w = pw - record.left - record.right;
    let mut out = Vec::with_capacity(b * c * h * w);
    for src in t.data().chunks(ph * pw) {
        for y in 0..h {
            let row = (y + record.top) * pw + record.left;
            out.extend_from_slice(&src[row..row + w]);
        }
    }
    Tensor::new(vec![b, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coronal_slice_padding() {
        let t = Tensor::zeros(&[1, 4, 240, 155]);
        let (p, rec) = pad_to_valid(&t, 8).unwrap();
        assert_eq!(p.shape(), &[1, 4, 240, 160]);
        assert_eq!(
            rec,
            CropRecord {
                top: 0,
                bottom: 0,
                left: 2,
                right: 3
            }
        );
    }

    #[test]
    fn divisible_is_unchanged() {
        let t = Tensor::full(&[1, 4, 240, 240], 2.0);
        let (p, rec) = pad_to_valid(&t, 8).unwrap();
        assert!(rec.is_empty());
        assert_eq!(p, t);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let data: Vec<f64> = (0..2 * 3 * 5 * 7).map(|i| i as f64 * 0.5 - 3.0).collect();
        let t = Tensor::new(vec![2, 3, 5, 7], data).unwrap();
        let (p, rec) = pad_to_valid(&t, 8).unwrap();
        assert_eq!(p.shape(), &[2, 3, 8, 8]);
        assert_eq!(
            rec,
            CropRecord {
                top: 1,
                bottom: 2,
                left: 0,
                right: 1
            }
        );
        assert_eq!(crop(&p, &rec).unwrap(), t);
        // padding is zero
        assert_eq!(p.sum(), t.sum());
    }
}
