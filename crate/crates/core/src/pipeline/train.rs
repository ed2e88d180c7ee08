//! Per-view, per-fold network training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::inference::predict_volume;
use super::optim::{sgd_step, OptimizerState};
use crate::error::{Error, Result};
use crate::loss::{one_hot, overall_loss_node, LossConfig};
use crate::metrics::{dice, BinaryMask};
use crate::model::checkpoint::{Checkpoint, EpochRecord, TrainingMeta, OPTIMIZER};
use crate::model::{apply_bn_updates, build, forward_graph, pad_to_valid, CropRecord, NetworkSpec};
use crate::tensor::{Graph, Mode, Tensor};
use crate::volume::{
    augment, class_index, kfold_split, slice_image, slice_labels, to_subregions, Case, SubRegion, View,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub view: View,
    pub fold: usize,
    /// Number of cross-validation folds; 1 trains on every case.
    pub folds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub loss: LossConfig,
    pub network: NetworkSpec,
    /// Seeds initialization, shuffling, augmentation and input noise.
    pub seed: u64,
    /// Seeds the case-to-fold assignment.
    pub split_seed: u64,
    /// Times each slice containing tumor is repeated per epoch.
    pub oversample: usize,
    /// Evaluate validation Dice every this many epochs; 0 disables it.
    pub validation_interval: usize,
    /// Random horizontal and vertical flips.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            view: View::Axial,
            fold: 0,
            folds: 5,
            epochs: 10,
            batch_size: 16,
            learning_rate: 8e-3,
            momentum: 0.9,
            loss: LossConfig::default(),
            network: NetworkSpec::default(),
            seed: 0,
            split_seed: 0,
            oversample: 1,
            validation_interval: 1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.oversample == 0 {
            return bad("batch_size and oversample must be positive".into());
        }
        if self.folds == 0 || self.fold >= self.folds {
            return bad(format!("fold {} is not in 0..{}", self.fold, self.folds));
        }
        self.loss.validate()?;
        self.network.validate()
    }
}

/// Training and validation cases of one fold. Case ids are sorted before
/// splitting so the assignment only depends on the id set and the seed.
pub fn fold_cases<'a>(
    cases: &'a [Case],
    folds: usize,
    fold: usize,
    split_seed: u64,
) -> Result<(Vec<&'a Case>, Vec<&'a Case>)> {
    if folds == 1 {
        return Ok((cases.iter().collect(), Vec::new()));
    }
    let mut ids: Vec<String> = cases.iter().map(|c| c.id().to_string()).collect();
    ids.sort();
    let split = kfold_split(&ids, folds, split_seed)?;
    let f = split
        .get(fold)
        .ok_or_else(|| Error::InvalidArgument(format!("fold {fold} is not in 0..{folds}")))?;
    let pick = |names: &[String]| -> Vec<&'a Case> {
        let mut v: Vec<&Case> = cases.iter().filter(|c| names.iter().any(|n| n == c.id())).collect();
        v.sort_by(|a, b| a.id().cmp(b.id()));
        v
    };
    Ok((pick(&f.train), pick(&f.validation)))
}

struct Sample {
    case: String,
    index: usize,
    /// `[4, h, w]`, padded.
    image: Tensor,
    /// Class indices, padded with background.
    classes: Vec<u8>,
}

fn pad_plane(values: &[u8], h: usize, w: usize, r: &CropRecord) -> Vec<u8> {
    let pw = w + r.left + r.right;
    let mut out = vec![0u8; (h + r.top + r.bottom) * pw];
    for y in 0..h {
        let row = (y + r.top) * pw + r.left;
        out[row..row + w].copy_from_slice(&values[y * w..(y + 1) * w]);
    }
    out
}

/// Brain-containing slices of the training cases; tumor slices repeated
/// `oversample` times.
fn collect_samples(cases: &[&Case], view: View, multiple: usize, oversample: usize) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for case in cases {
        let dims = case.volume.dims();
        let (h, w) = view.slice_shape(dims);
        for index in 0..view.slice_count(dims) {
            let image = slice_image(&case.volume, view, index)?;
            if image.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            let labels = slice_labels(&case.labels, view, index);
            let repeats = if labels.iter().any(|&l| l != 0) { oversample } else { 1 };
            let (padded, record) = pad_to_valid(&image.reshape(&[1, 4, h, w])?, multiple)?;
            let classes: Vec<u8> = labels
                .iter()
                .map(|&l| class_index(l).expect("validated labels"))
                .collect();
            let classes = pad_plane(&classes, h, w, &record);
            let shape = padded.shape()[1..].to_vec();
            let image = padded.reshape(&shape)?;
            for _ in 0..repeats {
                samples.push(Sample {
                    case: case.id().to_string(),
                    index,
                    image: image.clone(),
                    classes: classes.clone(),
                });
            }
        }
    }
    Ok(samples)
}

/// Mean whole-tumor Dice of `ckpt` over `cases`.
pub fn validation_wt_dice(ckpt: &Checkpoint, cases: &[&Case], view: View) -> Result<f64> {
    let mut total = 0.0;
    for case in cases {
        let pred = predict_volume(std::slice::from_ref(ckpt), &case.volume, view)?.to_labels()?;
        let (p, t) = (to_subregions(&pred), to_subregions(&case.labels));
        let pm = BinaryMask::new(p.dims, p.mask(SubRegion::WholeTumor).to_vec())?;
        let tm = BinaryMask::new(t.dims, t.mask(SubRegion::WholeTumor).to_vec())?;
        total += dice(&pm, &tm)?;
    }
    Ok(total / cases.len() as f64)
}

pub fn train(config: &TrainConfig, cases: &[Case]) -> Result<Checkpoint> {
    train_with_progress(config, cases, &mut |_| {})
}

/// Trains one network on the fold's training cases (which must already be
/// preprocessed), calling `progress` after every epoch.
pub fn train_with_progress(
    config: &TrainConfig,
    cases: &[Case],
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    config.validate()?;
    let (train_cases, val_cases) = fold_cases(cases, config.folds, config.fold, config.split_seed)?;
    if train_cases.is_empty() {
        return Err(Error::InvalidArgument("fold has no training cases".into()));
    }
    let dims = train_cases[0].volume.dims();
    if let Some(c) = train_cases.iter().find(|c| c.volume.dims() != dims) {
        return Err(Error::shape("train (case dims must agree)", &dims, &c.volume.dims()));
    }
    let spec = &config.network;
    let mut params = build(spec, config.seed)?;
    let mut opt = OptimizerState::zeros_like(&params);
    let samples = collect_samples(&train_cases, config.view, spec.spatial_multiple(), config.oversample)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training cases contain no brain slices".into()));
    }
    let [c, h, w] = [4, samples[0].image.shape()[1], samples[0].image.shape()[2]];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7e41_5eed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let meta = |history: Vec<EpochRecord>| TrainingMeta {
        view: Some(config.view),
        fold: (config.folds > 1).then_some(config.fold),
        optimizer: OPTIMIZER.into(),
        learning_rate: config.learning_rate,
        momentum: config.momentum,
        history,
    };
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut data = Vec::with_capacity(chunk.len() * c * h * w);
            let mut classes = Vec::with_capacity(chunk.len() * h * w);
            for &i in chunk {
                let s = &samples[i];
                if config.augment {
                    let (img, lab, _) = augment(&s.image, &s.classes, &mut rng);
                    data.extend_from_slice(img.data());
                    classes.extend_from_slice(&lab);
                } else {
                    data.extend_from_slice(s.image.data());
                    classes.extend_from_slice(&s.classes);
                }
            }
            let x = Tensor::new(vec![chunk.len(), c, h, w], data)?;
            let truth = one_hot(&classes, chunk.len(), spec.num_classes, h, w)?;
            let mut graph = Graph::new();
            let pass = forward_graph(&mut graph, &params, spec, &x, Mode::Train, true, Some(&mut rng))?;
            let loss = overall_loss_node(&mut graph, pass.probabilities, &truth, &config.loss)?;
            let value = graph.value(loss).item()?;
            if !value.is_finite() {
                let names: Vec<String> = chunk
                    .iter()
                    .map(|&i| format!("{}:{}", samples[i].case, samples[i].index))
                    .collect();
                return Err(Error::Numerical(format!(
                    "non-finite loss {value} at epoch {epoch}, batch {batch_index} (slices {})",
                    names.join(" ")
                )));
            }
            graph.backward(loss)?;
            let grads = pass.gradients(&graph);
            if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for {name} at epoch {epoch}, batch {batch_index}"
                )));
            }
            sgd_step(&mut params, &grads, &mut opt, config.learning_rate, config.momentum)?;
            apply_bn_updates(&mut params, pass.bn_updates)?;
            loss_sum += value;
            batches += 1;
        }
        let validate = !val_cases.is_empty()
            && config.validation_interval > 0
            && (epoch % config.validation_interval == 0 || epoch == config.epochs);
        let validation_wt_dice = if validate {
            let snapshot = Checkpoint {
                spec: spec.clone(),
                seed: config.seed,
                epoch,
                params: params.clone(),
                velocity: Default::default(),
                meta: meta(Vec::new()),
            };
            Some(validation_wt_dice(&snapshot, &val_cases, config.view)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            validation_wt_dice,
        };
        progress(&record);
        history.push(record);
    }
    Ok(Checkpoint {
        spec: spec.clone(),
        seed: config.seed,
        epoch: config.epochs,
        params,
        velocity: opt.velocity,
        meta: meta(history),
    })
}

/// Centered moving average with a window of `window` (shrinking at the ends).
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
