use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Shuffles `case_ids` with `seed` and cuts them into `k` validation folds
/// whose sizes differ by at most one.
pub fn kfold_split(case_ids: &[String], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > case_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} cases into {k} folds",
            case_ids.len()
        )));
    }
    let mut ids = case_ids.to_vec();
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::InvalidArgument(format!("duplicate case id {dup}")));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut bounds = Vec::with_capacity(k + 1);
    bounds.push(0);
    for i in 0..k {
        bounds.push(bounds[i] + base + usize::from(i < extra));
    }
    Ok((0..k)
        .map(|i| {
            let (lo, hi) = (bounds[i], bounds[i + 1]);
            Fold {
                index: i,
                validation: ids[lo..hi].to_vec(),
                train: ids[..lo].iter().chain(&ids[hi..]).cloned().collect(),
            }
        })
        .collect())
}
