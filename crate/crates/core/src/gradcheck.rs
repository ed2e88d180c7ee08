//! Central finite-difference verification of every differentiable operation.
//!
//! Each check draws random 64-bit inputs, reduces the op output to a scalar
//! through a fixed random projection `Σ out ⊙ R`, and compares the analytic
//! gradient of every input with `(f(x + h) − f(x − h)) / 2h`. The relative
//! error of one element is `|a − n| / max(|a|, |n|, 1e-8)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{cross_entropy_node, gdl_node, one_hot, overall_loss_node, LossConfig};
use crate::model::{build, forward_graph, se_block, NetworkSpec, ParameterSet, SeWeights, Variant};
use crate::tensor::{BatchNormConfig, BatchNormState, Fault, Graph, Mode, Padding, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Corrupts the backward pass of every graph the checker records.
    pub fault: Option<Fault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 20,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub op: String,
    pub trials: usize,
    pub worst_relative_error: f64,
    /// Input tensor holding the worst element.
    pub worst_tensor: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradcheckRow> {
        self.rows.iter().filter(|r| !r.passed)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>6} {:>12}  {:<24} result\n",
            "op", "trials", "worst rel", "tensor"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<24} {:>6} {:>12.3e}  {:<24} {}",
                r.op,
                r.trials,
                r.worst_relative_error,
                r.worst_tensor,
                if r.passed { "pass" } else { "FAIL" }
            );
        }
        out
    }
}

type BuildFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// A differentiable function of named input tensors.
struct Problem {
    inputs: Vec<(&'static str, Tensor)>,
    /// Inputs that receive gradients; the rest are constants.
    differentiable: Vec<bool>,
    build: BuildFn,
}

impl Problem {
    fn new(inputs: Vec<(&'static str, Tensor)>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Self {
        let differentiable = vec![true; inputs.len()];
        Self {
            inputs,
            differentiable,
            build: Box::new(build),
        }
    }

    fn constant(mut self, index: usize) -> Self {
        self.differentiable[index] = false;
        self
    }
}

type Generator = fn(&mut ChaCha8Rng) -> Problem;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("consistent shape")
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (
        rng.gen_range(1..=2),
        rng.gen_range(1..=4),
        rng.gen_range(3..=8),
        rng.gen_range(3..=8),
    )
}

/// Random softmax outputs and a random one-hot truth, `[B, 4, H, W]`.
fn probabilities(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let (b, h, w) = (rng.gen_range(1..=2), rng.gen_range(2..=8), rng.gen_range(2..=8));
    let c = 4;
    let mut p = randn(&[b, c, h, w], rng);
    let plane = h * w;
    for bi in 0..b {
        for i in 0..plane {
            let idx = |ch: usize| (bi * c + ch) * plane + i;
            let total: f64 = (0..c).map(|ch| p.data()[idx(ch)].exp()).sum();
            for ch in 0..c {
                let v = p.data()[idx(ch)].exp() / total;
                p.data_mut()[idx(ch)] = v;
            }
        }
    }
    let classes: Vec<u8> = (0..b * plane).map(|_| rng.gen_range(0..c as u8)).collect();
    (p, one_hot(&classes, b, c, h, w).expect("valid classes"))
}

fn conv_problem(rng: &mut ChaCha8Rng, stride: usize, with_bias: bool) -> Problem {
    let (b, cin, h, w) = dims(rng);
    let cout = rng.gen_range(1..=4);
    let k = rng.gen_range(1..=3);
    let pad = Padding {
        top: rng.gen_range(0..=1),
        bottom: rng.gen_range(0..=1),
        left: rng.gen_range(0..=1),
        right: rng.gen_range(0..=1),
    };
    let mut inputs = vec![
        ("input", randn(&[b, cin, h, w], rng)),
        ("kernel", randn(&[cout, cin, k, k], rng)),
    ];
    if with_bias {
        inputs.push(("bias", randn(&[cout], rng)));
    }
    Problem::new(inputs, move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad))
}

fn batch_norm_problem(rng: &mut ChaCha8Rng, mode: Mode) -> Problem {
    let (_, c, h, w) = dims(rng);
    let b = 2;
    let state = BatchNormState::new(
        (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
    );
    Problem::new(
        vec![
            ("input", randn(&[b, c, h, w], rng)),
            ("gamma", uniform(&[c], 0.5, 1.5, rng)),
            ("beta", randn(&[c], rng)),
        ],
        move |g, v| {
            let mut s = state.clone();
            g.batch_norm(v[0], v[1], v[2], &mut s, mode, BatchNormConfig::default())
        },
    )
}

/// Inputs kept away from the kink at zero so the central difference never
/// straddles it.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 1e-2 {
            *v = 1e-2f64.copysign(*v);
        }
    }
    t
}

fn generators() -> Vec<(&'static str, Generator)> {
    vec![
        ("conv2d", |r| conv_problem(r, 1, false)),
        ("conv2d+bias", |r| conv_problem(r, 1, true)),
        ("conv2d stride 2", |r| conv_problem(r, 2, true)),
        ("upsample2x", |r| {
            let (b, c, h, w) = dims(r);
            Problem::new(vec![("input", randn(&[b, c, h, w], r))], |g, v| g.upsample2x(v[0]))
        }),
        ("batch_norm train", |r| batch_norm_problem(r, Mode::Train)),
        ("batch_norm eval", |r| batch_norm_problem(r, Mode::Eval)),
        ("prelu", |r| {
            let (b, c, h, w) = dims(r);
            Problem::new(
                vec![
                    ("input", away_from_zero(&[b, c, h, w], r)),
                    ("slope", uniform(&[c], 0.0, 0.5, r)),
                ],
                |g, v| g.prelu(v[0], v[1]),
            )
        }),
        ("relu", |r| {
            let (b, c, h, w) = dims(r);
            Problem::new(vec![("input", away_from_zero(&[b, c, h, w], r))], |g, v| {
                Ok(g.relu(v[0]))
            })
        }),
        ("sigmoid", |r| {
            let (b, c, h, w) = dims(r);
            Problem::new(vec![("input", randn(&[b, c, h, w], r))], |g, v| Ok(g.sigmoid(v[0])))
        }),
        ("softmax_channels", |r| {
            let (b, _, h, w) = dims(r);
            let c = r.gen_range(2..=4);
            Problem::new(vec![("logits", randn(&[b, c, h, w], r))], |g, v| {
                g.softmax_channels(v[0])
            })
        }),
        ("global_avg_pool", |r| {
            let (b, c, h, w) = dims(r);
            Problem::new(vec![("input", randn(&[b, c, h, w], r))], |g, v| g.global_avg_pool(v[0]))
        }),
        ("dense", |r| {
            let (b, f, gw) = (r.gen_range(1..=2), r.gen_range(1..=6), r.gen_range(1..=6));
            Problem::new(
                vec![
                    ("input", randn(&[b, f], r)),
                    ("weights", randn(&[f, gw], r)),
                    ("bias", randn(&[gw], r)),
                ],
                |g, v| g.dense(v[0], v[1], v[2]),
            )
        }),
        ("add", |r| {
            let (b, c, h, w) = dims(r);
            Problem::new(
                vec![("a", randn(&[b, c, h, w], r)), ("b", randn(&[b, c, h, w], r))],
                |g, v| g.add(v[0], v[1]),
            )
        }),
        ("concat_channels", |r| {
            let (b, c, h, w) = dims(r);
            let c2 = r.gen_range(1..=4);
            Problem::new(
                vec![("a", randn(&[b, c, h, w], r)), ("b", randn(&[b, c2, h, w], r))],
                |g, v| g.concat_channels(v[0], v[1]),
            )
        }),
        ("mul", |r| {
            let (b, c, h, w) = dims(r);
            Problem::new(
                vec![("a", randn(&[b, c, h, w], r)), ("b", randn(&[b, c, h, w], r))],
                |g, v| g.mul(v[0], v[1]),
            )
        }),
        ("channel_scale", |r| {
            let (b, c, h, w) = dims(r);
            Problem::new(
                vec![("input", randn(&[b, c, h, w], r)), ("scale", randn(&[b, c], r))],
                |g, v| g.channel_scale(v[0], v[1]),
            )
        }),
        ("sum", |r| {
            let (b, c, h, w) = dims(r);
            Problem::new(vec![("input", randn(&[b, c, h, w], r))], |g, v| Ok(g.sum(v[0])))
        }),
        ("se_block", |r| {
            let (b, _, h, w) = dims(r);
            let c = r.gen_range(2..=6);
            let hidden = r.gen_range(1..=4);
            // Hidden pre-activations stay clear of the ReLU kink.
            let mut fc1_bias = randn(&[hidden], r);
            for v in fc1_bias.data_mut() {
                *v = v.signum() * (v.abs() + 1.0);
            }
            Problem::new(
                vec![
                    ("features", randn(&[b, c, h, w], r)),
                    ("fc1.weight", uniform(&[c, hidden], -0.1, 0.1, r)),
                    ("fc1.bias", fc1_bias),
                    ("fc2.weight", randn(&[hidden, c], r)),
                    ("fc2.bias", randn(&[c], r)),
                ],
                |g, v| {
                    se_block(
                        g,
                        v[0],
                        &SeWeights {
                            fc1_weight: v[1],
                            fc1_bias: v[2],
                            fc2_weight: v[3],
                            fc2_bias: v[4],
                        },
                    )
                },
            )
        }),
        ("gdl", |r| {
            let (p, truth) = probabilities(r);
            Problem::new(vec![("probabilities", p)], move |g, v| {
                gdl_node(g, v[0], &truth, &LossConfig::default())
            })
        }),
        ("cross_entropy", |r| {
            let (p, truth) = probabilities(r);
            Problem::new(vec![("probabilities", p)], move |g, v| {
                cross_entropy_node(g, v[0], &truth, &LossConfig::default())
            })
        }),
        ("overall_loss", |r| {
            let (p, truth) = probabilities(r);
            Problem::new(vec![("probabilities", p)], move |g, v| {
                overall_loss_node(g, v[0], &truth, &LossConfig::default())
            })
        }),
        ("softmax+overall_loss", |r| {
            let (_, truth) = probabilities(r);
            let s = truth.shape().to_vec();
            Problem::new(vec![("logits", randn(&s, r)), ("truth", truth.clone())], move |g, v| {
                let p = g.softmax_channels(v[0])?;
                overall_loss_node(g, p, &truth, &LossConfig::default())
            })
            .constant(1)
        }),
    ]
}

fn new_graph(fault: Option<Fault>) -> Graph {
    match fault {
        Some(f) => Graph::with_fault(f),
        None => Graph::new(),
    }
}

fn projected(
    problem: &Problem,
    values: &[Tensor],
    projection: Option<&Tensor>,
    fault: Option<Fault>,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut g = new_graph(fault);
    let vars: Vec<Var> = values
        .iter()
        .zip(&problem.differentiable)
        .map(|(t, &d)| g.leaf(t.clone(), d))
        .collect();
    let out = (problem.build)(&mut g, &vars)?;
    let scalar = match projection {
        Some(r) => {
            let rv = g.input(r.clone());
            let m = g.mul(out, rv)?;
            g.sum(m)
        }
        None => g.sum(out),
    };
    let value = g.value(scalar).item()?;
    g.backward(scalar)?;
    let grads = vars.iter().map(|v| g.grad(*v).cloned()).collect();
    Ok((value, grads))
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(DENOMINATOR_FLOOR)
}

/// Worst (error, tensor) over every element of every differentiable input.
fn check_problem(problem: &Problem, rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Result<(f64, &'static str)> {
    let values: Vec<Tensor> = problem.inputs.iter().map(|(_, t)| t.clone()).collect();
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = (problem.build)(&mut g, &vars)?;
        g.value(out).shape().to_vec()
    };
    let projection = if probe.iter().product::<usize>() > 1 {
        Some(randn(&probe, rng))
    } else {
        None
    };
    let (_, grads) = projected(problem, &values, projection.as_ref(), cfg.fault)?;
    let eval = |vals: &[Tensor]| projected(problem, vals, projection.as_ref(), None).map(|(v, _)| v);
    let mut worst = (0.0f64, problem.inputs.first().map_or("", |(n, _)| *n));
    for (i, (name, _)) in problem.inputs.iter().enumerate() {
        if !problem.differentiable[i] {
            continue;
        }
        let analytic = grads[i].clone().unwrap_or_else(|| Tensor::zeros(values[i].shape()));
        let mut vals = values.clone();
        for j in 0..values[i].len() {
            let x = values[i].data()[j];
            vals[i].data_mut()[j] = x + cfg.step;
            let plus = eval(&vals)?;
            vals[i].data_mut()[j] = x - cfg.step;
            let minus = eval(&vals)?;
            vals[i].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(analytic.data()[j], numeric);
            if !(err <= worst.0) {
                worst = (err, *name);
            }
        }
    }
    Ok(worst)
}

/// The whole network plus the training objective, differentiated with
/// respect to every trainable tensor (a sample of elements per tensor).
fn check_network(variant: Variant, rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Result<(f64, String)> {
    let spec = NetworkSpec {
        depth: 1,
        base_width: 2,
        se_reduction: 2,
        input_noise_sigma: 0.0,
        ..NetworkSpec::with_width(2, variant)
    };
    let mut params = build(&spec, rng.gen())?;
    for (name, t) in params.clone().trainable() {
        // Random slopes and biases make every tensor's gradient generic.
        if name.ends_with(".slope") || name.ends_with(".bias") || name.ends_with(".beta") {
            params.insert(name, uniform(t.shape(), 0.05, 0.5, rng));
        }
    }
    let (b, h, w) = (2, 4, 4);
    let input = randn(&[b, spec.in_channels, h, w], rng);
    let classes: Vec<u8> = (0..b * h * w)
        .map(|_| rng.gen_range(0..spec.num_classes as u8))
        .collect();
    let truth = one_hot(&classes, b, spec.num_classes, h, w)?;
    let loss_cfg = LossConfig::default();
    let objective = |p: &ParameterSet, fault: Option<Fault>| -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut g = new_graph(fault);
        let pass = forward_graph(&mut g, p, &spec, &input, Mode::Train, true, None)?;
        let loss = overall_loss_node(&mut g, pass.probabilities, &truth, &loss_cfg)?;
        let value = g.value(loss).item()?;
        g.backward(loss)?;
        Ok((value, pass.gradients(&g)))
    };
    let (_, grads) = objective(&params, cfg.fault)?;
    let mut worst = (0.0f64, String::new());
    let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let len = params.get(&name)?.len();
        let picks: Vec<usize> = if len <= 6 {
            (0..len).collect()
        } else {
            (0..6).map(|_| rng.gen_range(0..len)).collect()
        };
        for j in picks {
            let mut perturbed = params.clone();
            let x = params.get(&name)?.data()[j];
            perturbed.get_mut(&name).expect("present").data_mut()[j] = x + cfg.step;
            let plus = objective(&perturbed, None)?.0;
            perturbed.get_mut(&name).expect("present").data_mut()[j] = x - cfg.step;
            let minus = objective(&perturbed, None)?.0;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(grads[&name].data()[j], numeric);
            if !(err <= worst.0) {
                worst = (err, name.clone());
            }
        }
    }
    Ok(worst)
}

fn op_seed(seed: u64, op: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(op as u64)
}

/// Runs `cfg.trials` random trials of every check. With zero trials the
/// report is empty and counts as a pass.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(cfg.step > 0.0 && cfg.tolerance > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step and tolerance must be positive, got {} and {}",
            cfg.step, cfg.tolerance
        )));
    }
    if cfg.trials == 0 {
        return Ok(GradcheckReport {
            step: cfg.step,
            tolerance: cfg.tolerance,
            rows: Vec::new(),
        });
    }
    let gens = generators();
    let mut jobs: Vec<(String, usize)> = gens.iter().enumerate().map(|(i, (n, _))| (n.to_string(), i)).collect();
    jobs.push(("network+objective".into(), gens.len()));
    jobs.push(("plain network+objective".into(), gens.len() + 1));
    let rows = jobs
        .par_iter()
        .map(|(op, idx)| {
            let mut rng = ChaCha8Rng::seed_from_u64(op_seed(cfg.seed, *idx));
            let mut worst = (0.0f64, String::new());
            for _ in 0..cfg.trials {
                let (err, tensor) = match *idx {
                    i if i < gens.len() => {
                        let problem = (gens[i].1)(&mut rng);
                        let (e, t) = check_problem(&problem, &mut rng, cfg)?;
                        (e, t.to_string())
                    }
                    i if i == gens.len() => check_network(Variant::MinorModsPlusAttention, &mut rng, cfg)?,
                    _ => check_network(Variant::PlainUnet, &mut rng, cfg)?,
                };
                if !(err <= worst.0) {
                    worst = (err, tensor);
                }
            }
            Ok(GradcheckRow {
                op: op.clone(),
                trials: cfg.trials,
                worst_relative_error: worst.0,
                worst_tensor: worst.1,
                passed: worst.0 <= cfg.tolerance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        step: cfg.step,
        tolerance: cfg.tolerance,
        rows,
    })
}
