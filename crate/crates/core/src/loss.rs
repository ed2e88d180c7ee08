//! Generalized Dice loss with adaptive class weights, cross-entropy, and
//! their weighted sum.
//!
//! All losses take a one-hot ground truth `G` and predicted probabilities
//! `P`, both `[B, C, H, W]`. Sums run over every pixel of the batch, so
//! `N = B·H·W`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Cross-entropy mixing coefficient.
    pub lambda: f64,
    /// Dice regularization constant added to numerator and denominator.
    pub epsilon: f64,
    /// Lower clamp for probabilities inside `ln`.
    pub prob_floor: f64,
    /// Lower bound on the per-class pixel count used for the weights. It
    /// caps the weight of classes absent from a batch; with a guard of 1 a
    /// batch without enhancing tumor drives that class to zero everywhere
    /// and training collapses to background.
    pub weight_guard: f64,
    /// Use `1 / (Σ g)²` class weights instead of `1 / Σ g`.
    pub squared_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.25,
            epsilon: 1e-5,
            prob_floor: 1e-7,
            weight_guard: 100.0,
            squared_weights: false,
        }
    }
}

impl LossConfig {
    /// `gdl + λ·ce`.
    pub fn mix(&self, gdl: f64, ce: f64) -> f64 {
        gdl + self.lambda * ce
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor <= 1e-6) {
            return Err(Error::InvalidArgument(format!(
                "prob_floor must lie in (0, 1e-6], got {}",
                self.prob_floor
            )));
        }
        if !(self.weight_guard > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight_guard must be > 0, got {}",
                self.weight_guard
            )));
        }
        Ok(())
    }
}

/// A validated (ground truth, prediction) pair.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub truth: Tensor,
    pub prediction: Tensor,
}

impl LabeledBatch {
    /// Checks that `truth` is one-hot and `prediction` sums to one per pixel.
    pub fn new(truth: Tensor, prediction: Tensor) -> Result<Self> {
        let [b, c, h, w] = check_shapes("labeled batch", &truth, &prediction)?;
        let plane = h * w;
        for bi in 0..b {
            for p in 0..plane {
                let at = |t: &Tensor, ch: usize| t.data()[(bi * c + ch) * plane + p];
                let ones = (0..c).filter(|&ch| at(&truth, ch) == 1.0).count();
                let zeros = (0..c).filter(|&ch| at(&truth, ch) == 0.0).count();
                if ones != 1 || zeros != c - 1 {
                    return Err(Error::InvalidArgument(format!(
                        "ground truth is not one-hot at batch {bi}, pixel {p}"
                    )));
                }
                let total: f64 = (0..c).map(|ch| at(&prediction, ch)).sum();
                if (total - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(format!(
                        "prediction sums to {total} at batch {bi}, pixel {p}"
                    )));
                }
            }
        }
        Ok(Self { truth, prediction })
    }

    pub fn pixels(&self) -> usize {
        let s = self.truth.shape();
        s[0] * s[2] * s[3]
    }

    pub fn classes(&self) -> usize {
        self.truth.shape()[1]
    }
}

fn check_shapes(op: &'static str, g: &Tensor, p: &Tensor) -> Result<[usize; 4]> {
    if g.shape() != p.shape() {
        return Err(Error::shape(op, g.shape(), p.shape()));
    }
    g.dims4(op)
}

/// Per-class sums over all pixels: `(Σ g·p, Σ (g+p), Σ g)`.
fn class_sums(g: &Tensor, p: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let s = g.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let mut inter = vec![0.0; c];
    let mut total = vec![0.0; c];
    let mut count = vec![0.0; c];
    for (chunk_idx, (gp, pp)) in g.data().chunks(plane).zip(p.data().chunks(plane)).enumerate() {
        let ch = chunk_idx % c;
        for (gv, pv) in gp.iter().zip(pp) {
            inter[ch] += gv * pv;
            total[ch] += gv + pv;
            count[ch] += gv;
        }
    }
    (inter, total, count)
}

fn weights_from_counts(count: &[f64], cfg: &LossConfig) -> Vec<f64> {
    count
        .iter()
        .map(|&n| {
            let n = n.max(cfg.weight_guard);
            if cfg.squared_weights {
                1.0 / (n * n)
            } else {
                1.0 / n
            }
        })
        .collect()
}

/// Adaptive class weights `W_j = 1 / max(Σ_i g_ij, guard)`.
pub fn class_weights(g: &Tensor, cfg: &LossConfig) -> Result<Vec<f64>> {
    g.dims4("class_weights")?;
    let (_, _, count) = class_sums(g, g);
    Ok(weights_from_counts(&count, cfg))
}

struct DiceTerms {
    weights: Vec<f64>,
    numerator: f64,
    denominator: f64,
}

fn dice_terms(g: &Tensor, p: &Tensor, cfg: &LossConfig) -> DiceTerms {
    let (inter, total, count) = class_sums(g, p);
    let weights = weights_from_counts(&count, cfg);
    let numerator = weights.iter().zip(&inter).map(|(w, v)| w * v).sum::<f64>() + cfg.epsilon;
    let denominator = weights.iter().zip(&total).map(|(w, v)| w * v).sum::<f64>() + cfg.epsilon;
    DiceTerms {
        weights,
        numerator,
        denominator,
    }
}

/// Generalized Dice loss.
pub fn gdl(g: &Tensor, p: &Tensor, cfg: &LossConfig) -> Result<f64> {
    check_shapes("gdl", g, p)?;
    let t = dice_terms(g, p, cfg);
    Ok(1.0 - 2.0 * t.numerator / t.denominator)
}

/// Mean categorical cross-entropy over all pixels.
pub fn cross_entropy(g: &Tensor, p: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let [b, _, h, w] = check_shapes("cross_entropy", g, p)?;
    let n = (b * h * w) as f64;
    let s: f64 = g
        .data()
        .iter()
        .zip(p.data())
        .filter(|(gv, _)| **gv != 0.0)
        .map(|(gv, pv)| gv * pv.max(cfg.prob_floor).ln())
        .sum();
    Ok(-s / n)
}

pub fn overall_loss(g: &Tensor, p: &Tensor, cfg: &LossConfig) -> Result<f64> {
    Ok(cfg.mix(gdl(g, p, cfg)?, cross_entropy(g, p, cfg)?))
}

fn gdl_grad(g: &Tensor, p: &Tensor, cfg: &LossConfig) -> Vec<f64> {
    let t = dice_terms(g, p, cfg);
    let s = g.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    let d2 = t.denominator * t.denominator;
    g.data()
        .iter()
        .enumerate()
        .map(|(i, gv)| {
            let w = t.weights[(i / plane) % c];
            -2.0 * w * (gv * t.denominator - t.numerator) / d2
        })
        .collect()
}

fn ce_grad(g: &Tensor, p: &Tensor, cfg: &LossConfig) -> Vec<f64> {
    let s = g.shape();
    let n = (s[0] * s[2] * s[3]) as f64;
    g.data()
        .iter()
        .zip(p.data())
        .map(|(gv, pv)| if *pv > cfg.prob_floor { -gv / (pv * n) } else { 0.0 })
        .collect()
}

fn record(
    graph: &mut Graph,
    p: Var,
    g: &Tensor,
    cfg: &LossConfig,
    value: f64,
    grad: fn(&Tensor, &Tensor, &LossConfig) -> Vec<f64>,
) -> Var {
    let truth = g.clone();
    let cfg = *cfg;
    graph.custom(&[p], Tensor::scalar(value), move |inputs, up| {
        let scale = up.data()[0];
        let mut d = grad(&truth, inputs[0], &cfg);
        d.iter_mut().for_each(|v| *v *= scale);
        vec![Some(d)]
    })
}

/// Records the generalized Dice loss of probabilities `p` in `graph`.
pub fn gdl_node(graph: &mut Graph, p: Var, g: &Tensor, cfg: &LossConfig) -> Result<Var> {
    let value = gdl(g, graph.value(p), cfg)?;
    Ok(record(graph, p, g, cfg, value, gdl_grad))
}

pub fn cross_entropy_node(graph: &mut Graph, p: Var, g: &Tensor, cfg: &LossConfig) -> Result<Var> {
    let value = cross_entropy(g, graph.value(p), cfg)?;
    Ok(record(graph, p, g, cfg, value, ce_grad))
}

/// Records `gdl + λ·ce` in `graph`.
pub fn overall_loss_node(graph: &mut Graph, p: Var, g: &Tensor, cfg: &LossConfig) -> Result<Var> {
    let value = overall_loss(g, graph.value(p), cfg)?;
    fn both(g: &Tensor, p: &Tensor, cfg: &LossConfig) -> Vec<f64> {
        let mut d = gdl_grad(g, p, cfg);
        for (a, b) in d.iter_mut().zip(ce_grad(g, p, cfg)) {
            *a += cfg.lambda * b;
        }
        d
    }
    Ok(record(graph, p, g, cfg, value, both))
}

/// One-hot encodes class indices `[B, H, W]` into `[B, C, H, W]`.
pub fn one_hot(classes: &[u8], batch: usize, num_classes: usize, h: usize, w: usize) -> Result<Tensor> {
    let plane = h * w;
    if classes.len() != batch * plane {
        return Err(Error::InvalidArgument(format!(
            "{} class indices for a {batch}×{h}×{w} batch",
            classes.len()
        )));
    }
    let mut data = vec![0.0; batch * num_classes * plane];
    for (i, &cls) in classes.iter().enumerate() {
        let cls = cls as usize;
        if cls >= num_classes {
            return Err(Error::InvalidArgument(format!("class index {cls} >= {num_classes}")));
        }
        let (b, p) = (i / plane, i % plane);
        data[(b * num_classes + cls) * plane + p] = 1.0;
    }
    Tensor::new(vec![batch, num_classes, h, w], data)
}
