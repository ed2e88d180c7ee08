//! Dice overlap and percentile Hausdorff distance on binary masks.
//!
//! Hausdorff distances use an exact separable Euclidean distance transform
//! (Felzenszwalb-Huttenlocher) of the target set, so every directed
//! distance equals the all-pairs minimum bit for bit on unit spacing.

mod report;

use serde::{Deserialize, Serialize};

pub use report::{
    evaluate_cases, quantile_table, CaseMetrics, Definitions, MetricsConfig, MetricsReport, QuantileRow,
    RegionAggregate, RegionMetrics, CSV_HEADER, QUANTILE_CSV_HEADER, REPORT_SCHEMA_VERSION,
};

use crate::error::{Error, Result};
use crate::stats;
use crate::volume::{to_subregions, Dims, LabelVolume, SubRegion};

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    dims: Dims,
    bits: Vec<bool>,
    spacing: [f64; 3],
}

impl BinaryMask {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.iter().product::<usize>() || bits.is_empty() {
            return Err(Error::shape("BinaryMask", &dims, &[bits.len()]));
        }
        Ok(Self {
            dims,
            bits,
            spacing: [1.0; 3],
        })
    }

    pub fn from_fn(dims: Dims, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    bits.push(f(x, y, z));
                }
            }
        }
        Self {
            dims,
            bits,
            spacing: [1.0; 3],
        }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.index(x, y, z)]
    }

    fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    fn check_pair(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(op, &self.dims, &other.dims));
        }
        if self.spacing != other.spacing {
            return Err(Error::InvalidArgument(format!(
                "{op}: masks have different voxel spacing"
            )));
        }
        Ok(())
    }
}

/// `2|X∩Y| / (|X|+|Y|)`; 1 when both masks are empty.
pub fn dice(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    x.check_pair(y, "dice")?;
    let (mut both, mut total) = (0usize, 0usize);
    for (&a, &b) in x.bits.iter().zip(&y.bits) {
        both += usize::from(a && b);
        total += usize::from(a) + usize::from(b);
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * both as f64 / total as f64
    })
}

/// Foreground voxels with at least one background (or out-of-bounds)
/// face neighbour.
pub fn surface_mask(mask: &BinaryMask) -> BinaryMask {
    let [nx, ny, nz] = mask.dims;
    let bits = (0..mask.bits.len())
        .map(|i| {
            if !mask.bits[i] {
                return false;
            }
            let [x, y, z] = mask.coords(i);
            x == 0
                || y == 0
                || z == 0
                || x + 1 == nx
                || y + 1 == ny
                || z + 1 == nz
                || !mask.bits[i - 1]
                || !mask.bits[i + 1]
                || !mask.bits[i - nx]
                || !mask.bits[i + nx]
                || !mask.bits[i - nx * ny]
                || !mask.bits[i + nx * ny]
        })
        .collect();
    BinaryMask {
        dims: mask.dims,
        bits,
        spacing: mask.spacing,
    }
}

/// Surface voxel coordinates `[x, y, z]` in memory order.
pub fn surface(mask: &BinaryMask) -> Vec<[usize; 3]> {
    let s = surface_mask(mask);
    (0..s.bits.len()).filter(|&i| s.bits[i]).map(|i| s.coords(i)).collect()
}

/// Lower envelope of parabolas for one line; `f` holds squared distances
/// (`INFINITY` where no seed lies).
fn edt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let qp = q as f64 * step;
        while let Some(&k) = v.last() {
            let kp = k as f64 * step;
            let sect = ((f[q] + qp * qp) - (f[k] + kp * kp)) / (2.0 * (qp - kp));
            if sect <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(sect);
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let pp = p as f64 * step;
        while k + 1 < v.len() && z[k + 1] < pp {
            k += 1;
        }
        let d = pp - v[k] as f64 * step;
        *o = f[v[k]] + d * d;
    }
}

/// Squared Euclidean distance from every voxel to the nearest foreground
/// voxel of `mask` (`INFINITY` everywhere if the mask is empty).
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let dims = mask.dims;
    let mut d: Vec<f64> = mask.bits.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let longest = *dims.iter().max().expect("three axes");
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut z) = (Vec::with_capacity(longest), Vec::with_capacity(longest));
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for j in 0..dims[b] {
            for i in 0..dims[a] {
                let base = i * strides[a] + j * strides[b];
                for t in 0..n {
                    line[t] = d[base + t * stride];
                }
                edt_line(&line[..n], mask.spacing[axis], &mut out[..n], &mut v, &mut z);
                for t in 0..n {
                    d[base + t * stride] = out[t];
                }
            }
        }
    }
    d
}

/// Point sets the distances are measured between.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Boundary voxels of each mask.
    #[default]
    Surface,
    /// Every foreground voxel.
    FullSet,
}

fn point_set(mask: &BinaryMask, mode: DistanceMode) -> BinaryMask {
    match mode {
        DistanceMode::Surface => surface_mask(mask),
        DistanceMode::FullSet => mask.clone(),
    }
}

/// Distances from every point of `from` to the nearest point of `to`.
pub fn directed_distances(from: &BinaryMask, to: &BinaryMask) -> Vec<f64> {
    let dt = squared_distance_transform(to);
    from.bits
        .iter()
        .zip(&dt)
        .filter(|(&b, _)| b)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

/// Symmetric percentile Hausdorff distance: the larger of the two directed
/// `percentile`-th (nearest-rank) point-to-set distances. `None` when
/// either mask is empty. `percentile = 100` gives the classic Hausdorff.
pub fn hausdorff(x: &BinaryMask, y: &BinaryMask, percentile: f64, mode: DistanceMode) -> Result<Option<f64>> {
    x.check_pair(y, "hausdorff")?;
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile must lie in (0, 100], got {percentile}"
        )));
    }
    if x.is_empty() || y.is_empty() {
        return Ok(None);
    }
    let (px, py) = (point_set(x, mode), point_set(y, mode));
    let q = percentile / 100.0;
    // A nonempty mask always has a nonempty surface.
    let a = stats::percentile(&directed_distances(&px, &py), q).expect("nonempty point set");
    let b = stats::percentile(&directed_distances(&py, &px), q).expect("nonempty point set");
    Ok(Some(a.max(b)))
}

pub fn hausdorff95(x: &BinaryMask, y: &BinaryMask) -> Result<Option<f64>> {
    hausdorff(x, y, 95.0, DistanceMode::Surface)
}

/// Dice and percentile Hausdorff for WT, TC and ET.
pub fn evaluate_case(pred: &LabelVolume, truth: &LabelVolume, cfg: &MetricsConfig) -> Result<Vec<RegionMetrics>> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape("evaluate_case", &pred.dims(), &truth.dims()));
    }
    let (p, t) = (to_subregions(pred), to_subregions(truth));
    SubRegion::ALL
        .iter()
        .map(|&region| {
            let pm = BinaryMask::new(p.dims, p.mask(region).to_vec())?.with_spacing(cfg.spacing)?;
            let tm = BinaryMask::new(t.dims, t.mask(region).to_vec())?.with_spacing(cfg.spacing)?;
            Ok(RegionMetrics {
                region,
                dice: dice(&pm, &tm)?,
                dice_both_empty: pm.is_empty() && tm.is_empty(),
                hausdorff: hausdorff(&pm, &tm, cfg.percentile, cfg.mode)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(dims: Dims, density: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
        let n = dims.iter().product();
        BinaryMask::new(dims, (0..n).map(|_| rng.gen_bool(density)).collect()).unwrap()
    }

    fn single(dims: Dims, p: [usize; 3]) -> BinaryMask {
        BinaryMask::from_fn(dims, |x, y, z| [x, y, z] == p)
    }

    #[test]
    fn dice_examples() {
        let a = BinaryMask::new([4, 1, 1], vec![true, true, false, false]).unwrap();
        let b = BinaryMask::new([4, 1, 1], vec![false, true, true, false]).unwrap();
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        let empty = BinaryMask::new([4, 1, 1], vec![false; 4]).unwrap();
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice(&a, &empty).unwrap(), 0.0);
        assert!(dice(&a, &BinaryMask::new([2, 2, 1], vec![false; 4]).unwrap()).is_err());
    }

    #[test]
    fn surface_examples() {
        assert_eq!(surface(&single([3, 3, 3], [1, 1, 1])), vec![[1, 1, 1]]);
        let cube = BinaryMask::from_fn([5, 5, 5], |x, y, z| {
            (1..4).contains(&x) && (1..4).contains(&y) && (1..4).contains(&z)
        });
        let s = surface(&cube);
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&[2, 2, 2]));
        let full = BinaryMask::from_fn([3, 3, 3], |_, _, _| true);
        assert_eq!(surface(&full).len(), 26);
    }

    #[test]
    fn three_four_five() {
        let x = single([5, 5, 1], [0, 0, 0]);
        let y = single([5, 5, 1], [3, 4, 0]);
        assert_eq!(hausdorff95(&x, &y).unwrap(), Some(5.0));
        assert_eq!(hausdorff(&x, &y, 100.0, DistanceMode::FullSet).unwrap(), Some(5.0));
    }

    #[test]
    fn empty_masks_are_undefined() {
        let x = single([4, 4, 4], [1, 1, 1]);
        let empty = BinaryMask::from_fn([4, 4, 4], |_, _, _| false);
        assert_eq!(hausdorff95(&x, &empty).unwrap(), None);
        assert_eq!(hausdorff95(&empty, &empty).unwrap(), None);
    }

    #[test]
    fn distance_transform_handles_spacing() {
        let m = single([4, 1, 1], [0, 0, 0]).with_spacing([2.0, 1.0, 1.0]).unwrap();
        assert_eq!(squared_distance_transform(&m), vec![0.0, 4.0, 16.0, 36.0]);
        let empty = BinaryMask::from_fn([2, 2, 2], |_, _, _| false);
        assert!(squared_distance_transform(&empty).iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = random_mask([8, 8, 8], 0.3, &mut rng);
            let b = random_mask([8, 8, 8], 0.3, &mut rng);
            // Embed with a margin so the shift never clips voxels or creates
            // new image-border surface.
            let embed = |m: &BinaryMask, s: usize| {
                BinaryMask::from_fn([14, 14, 14], |x, y, z| {
                    let r = 2 + s..10 + s;
                    r.contains(&x) && r.contains(&y) && r.contains(&z) && m.get(x - 2 - s, y - 2 - s, z - 2 - s)
                })
            };
            let (a0, b0, a1, b1) = (embed(&a, 0), embed(&b, 0), embed(&a, 2), embed(&b, 2));
            assert_eq!(dice(&a0, &b0).unwrap(), dice(&a1, &b1).unwrap());
            assert_eq!(hausdorff95(&a0, &b0).unwrap(), hausdorff95(&a1, &b1).unwrap());
        }
    }

    #[test]
    fn invalid_percentile_rejected() {
        let x = single([2, 2, 2], [0, 0, 0]);
        assert!(hausdorff(&x, &x, 0.0, DistanceMode::Surface).is_err());
        assert!(hausdorff(&x, &x, 101.0, DistanceMode::Surface).is_err());
    }
}
