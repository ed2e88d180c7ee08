//! Nearest-rank order statistics shared by intensity clipping, HD95 and
//! report quantiles.

use serde::{Deserialize, Serialize};

/// 1-based nearest rank `⌈q·n⌉` clamped to `[1, n]`.
///
/// A relative tolerance absorbs representation error so that e.g.
/// `0.99 · 100` selects rank 99 rather than 100.
pub fn nearest_rank(q: f64, n: usize) -> usize {
    let raw = q * n as f64;
    let rank = (raw - raw.abs() * 1e-12).ceil();
    (rank.max(1.0) as usize).min(n)
}

/// Value at the nearest-rank `q`-quantile of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    Some(sorted[nearest_rank(q, sorted.len()) - 1])
}

/// Nearest-rank quantile of unsorted values; NaNs are not allowed.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, q)
}

/// Five-number summary plus mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p| percentile_sorted(&v, p).expect("nonempty");
        Some(Summary {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_of_one_to_five() {
        let s = Summary::of(&[5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (2.0, 3.0, 4.0));
        assert_eq!((s.min, s.max, s.mean), (1.0, 5.0, 3.0));
    }

    #[test]
    fn single_value_summary() {
        let s = Summary::of(&[0.7]).unwrap();
        assert_eq!([s.min, s.q1, s.median, s.q3, s.max], [0.7; 5]);
    }

    #[test]
    fn ranks_at_exact_products() {
        assert_eq!(nearest_rank(0.99, 100), 99);
        assert_eq!(nearest_rank(0.01, 100), 1);
        assert_eq!(nearest_rank(0.95, 20), 19);
        assert_eq!(nearest_rank(0.95, 1), 1);
        assert_eq!(nearest_rank(0.0, 10), 1);
        assert_eq!(nearest_rank(1.0, 10), 10);
    }
}
