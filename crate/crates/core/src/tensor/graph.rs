use serde::{Deserialize, Serialize};

use super::conv::{self, ConvGeometry, Padding};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    /// Weight of the previous running statistic in the exponential average.
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }
}

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchNormState {
    running: Option<(Vec<f64>, Vec<f64>)>,
}

impl BatchNormState {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Self {
        Self {
            running: Some((mean, var)),
        }
    }

    pub fn uninitialized() -> Self {
        Self { running: None }
    }

    pub fn running(&self) -> Option<(&[f64], &[f64])> {
        self.running.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn into_running(self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.running
    }
}

/// Deliberate backward-pass corruptions used to prove the gradient checker
/// catches faults.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    ConvBackward,
}

type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor) -> Vec<Option<Vec<f64>>>>;

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Upsample2x {
        input: Var,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Prelu {
        input: Var,
        slope: Var,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Softmax {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ChannelScale {
        input: Var,
        scale: Var,
    },
    Sum {
        input: Var,
    },
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records operations in execution order so that [`Graph::backward`] can
/// replay the chain rule in reverse.
///
/// Leaf gradients accumulate across calls to `backward` until
/// [`Graph::zero_grad`] is called.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

fn channel_plane(shape: [usize; 4]) -> (usize, usize, usize) {
    let [b, c, h, w] = shape;
    (b, c, h * w)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input, no gradient tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: Padding) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let [batch, cin, h, w] = x.dims4("conv2d")?;
        let [cout, kcin, kh, kw] = k.dims4("conv2d kernel")?;
        if kcin != cin {
            return Err(Error::shape("conv2d", x.shape(), k.shape()));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv2d bias", k.shape(), self.value(b).shape()));
            }
        }
        let (ho, wo) = ConvGeometry::output_extent(h, w, kh, kw, stride, pad)
            .ok_or_else(|| Error::shape("conv2d (padded input smaller than kernel)", x.shape(), k.shape()))?;
        let geom = ConvGeometry {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let out = conv::forward(&geom, x.data(), k.data(), bias.map(|b| self.value(b).data()));
        let value = Tensor::new(vec![batch, cout, ho, wo], out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [b, c, h, w] = x.dims4("upsample2x")?;
        let mut out = vec![0.0; b * c * 4 * h * w];
        for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    dst[y * 2 * w + xo] = plane[(y / 2) * w + xo / 2];
                }
            }
        }
        let value = Tensor::new(vec![b, c, 2 * h, 2 * w], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Upsample2x { input }, rg))
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: Mode,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        let x = self.value(input);
        let shape = x.dims4("batch_norm")?;
        let (b, c, plane) = channel_plane(shape);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        if g.len() != c || bt.len() != c {
            return Err(Error::shape(
                "batch_norm gamma/beta",
                x.shape(),
                self.value(gamma).shape(),
            ));
        }
        if let Some((m, v)) = state.running() {
            if m.len() != c || v.len() != c {
                return Err(Error::shape("batch_norm running state", x.shape(), &[m.len()]));
            }
        }
        let xd = x.data();
        let mut normalized = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let count = (b * plane) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        let start = (bi * c + ch) * plane;
                        s += xd[start..start + plane].iter().sum::<f64>();
                    }
                    let mu = s / count;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        let start = (bi * c + ch) * plane;
                        ss += xd[start..start + plane]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / count;
                }
                (mean, var)
            }
            Mode::Eval => {
                let (m, v) = state.running().ok_or_else(|| {
                    Error::InvalidArgument("batch_norm in eval mode needs initialized running statistics".into())
                })?;
                (m.to_vec(), v.to_vec())
            }
        };
        for ch in 0..c {
            inv_std[ch] = 1.0 / (var[ch] + cfg.epsilon).sqrt();
        }
        for bi in 0..b {
            for ch in 0..c {
                let start = (bi * c + ch) * plane;
                for i in start..start + plane {
                    let nv = (xd[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = nv;
                    out[i] = g[ch] * nv + bt[ch];
                }
            }
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        let op = match mode {
            Mode::Train => {
                let m = cfg.momentum;
                let (rm, rv) = state.running.take().unwrap_or_else(|| (vec![0.0; c], vec![1.0; c]));
                let rm = rm.iter().zip(&mean).map(|(r, x)| m * r + (1.0 - m) * x).collect();
                let rv = rv.iter().zip(&var).map(|(r, x)| m * r + (1.0 - m) * x).collect();
                state.running = Some((rm, rv));
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                }
            }
            Mode::Eval => Op::BatchNormEval {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        };
        Ok(self.push(value, op, rg))
    }

    /// Parametric ReLU with one learnable slope per channel.
    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var> {
        let x = self.value(input);
        let c = *x.shape().get(1).ok_or_else(|| Error::shape("prelu", x.shape(), &[]))?;
        let a = self.value(slope);
        if a.len() != c {
            return Err(Error::shape("prelu slope", x.shape(), a.shape()));
        }
        let plane: usize = x.shape()[2..].iter().product();
        let a = a.data();
        let out = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.0 { v } else { a[(i / plane) % c] * v })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.any_grad(&[input, slope]);
        Ok(self.push(value, Op::Prelu { input, slope }, rg))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let value = match kind {
            Activation::Sigmoid => self.value(input).map(sigmoid),
            Activation::Relu => self.value(input).map(|v| v.max(0.0)),
        };
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Activation { input, kind }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    /// Softmax over the channel axis at every pixel, max-subtracted.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let shape = x.dims4("softmax_channels")?;
        let (b, c, plane) = channel_plane(shape);
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        let mut buf = vec![0.0; c];
        for bi in 0..b {
            let base = bi * c * plane;
            for p in 0..plane {
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(xd[base + ch * plane + p]);
                }
                let mut total = 0.0;
                for ch in 0..c {
                    let e = (xd[base + ch * plane + p] - max).exp();
                    buf[ch] = e;
                    total += e;
                }
                for ch in 0..c {
                    out[base + ch * plane + p] = buf[ch] / total;
                }
            }
        }
        let value = Tensor::new(shape.to_vec(), out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Softmax { input }, rg))
    }

    /// Spatial mean per channel: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let shape = x.dims4("global_avg_pool")?;
        let (b, c, plane) = channel_plane(shape);
        let out = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![b, c], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool { input }, rg))
    }

    /// Affine map `input · weights + bias` for `[B,F] × [F,G]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weights);
        let bias_t = self.value(bias);
        let (b, f, g) = match (x.shape(), w.shape()) {
            ([b, f], [f2, g]) if f == f2 => (*b, *f, *g),
            _ => return Err(Error::shape("dense", x.shape(), w.shape())),
        };
        if bias_t.shape() != [g] {
            return Err(Error::shape("dense bias", w.shape(), bias_t.shape()));
        }
        let (xd, wd, bd) = (x.data(), w.data(), bias_t.data());
        let mut out = vec![0.0; b * g];
        for bi in 0..b {
            for j in 0..g {
                let mut acc = bd[j];
                for i in 0..f {
                    acc += xd[bi * f + i] * wd[i * g + j];
                }
                out[bi * g + j] = acc;
            }
        }
        let value = Tensor::new(vec![b, g], out)?;
        let rg = self.any_grad(&[input, weights, bias]);
        Ok(self.push(value, Op::Dense { input, weights, bias }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", x.shape(), y.shape()));
        }
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Channel-axis concatenation with `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let [bx, cx, hx, wx] = x.dims4("concat_channels")?;
        let [by, cy, hy, wy] = y.dims4("concat_channels")?;
        if (bx, hx, wx) != (by, hy, wy) {
            return Err(Error::shape("concat_channels", x.shape(), y.shape()));
        }
        let plane = hx * wx;
        let mut out = Vec::with_capacity(x.len() + y.len());
        for bi in 0..bx {
            out.extend_from_slice(&x.data()[bi * cx * plane..(bi + 1) * cx * plane]);
            out.extend_from_slice(&y.data()[bi * cy * plane..(bi + 1) * cy * plane]);
        }
        let value = Tensor::new(vec![bx, cx + cy, hx, wx], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    pub fn combine(&mut self, a: Var, b: Var, kind: Combine) -> Result<Var> {
        match kind {
            Combine::Add => self.add(a, b),
            Combine::ConcatChannels => self.concat_channels(a, b),
        }
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", x.shape(), y.shape()));
        }
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    /// `out[b,c,:,:] = scale[b,c] · input[b,c,:,:]`.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let x = self.value(input);
        let s = self.value(scale);
        let shape = x.dims4("channel_scale")?;
        let (b, c, plane) = channel_plane(shape);
        if s.shape() != [b, c] {
            return Err(Error::shape("channel_scale", x.shape(), s.shape()));
        }
        let sd = s.data();
        let out = x.data().iter().enumerate().map(|(i, v)| v * sd[i / plane]).collect();
        let value = Tensor::new(shape.to_vec(), out)?;
        let rg = self.any_grad(&[input, scale]);
        Ok(self.push(value, Op::ChannelScale { input, scale }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sum { input }, rg)
    }

    /// Records an operation whose forward value was computed by the caller.
    ///
    /// `backward` receives the input values and the upstream gradient and
    /// returns one optional gradient (flattened, same length as the input)
    /// per input.
    pub fn custom<F>(&mut self, inputs: &[Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&[&Tensor], &Tensor) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let rg = self.any_grad(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            rg,
        )
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out_len = self.nodes[output.0].value.len();
        if out_len != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a single-element output, got shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let contributions = self.local_grads(idx, &upstream);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match node.grad.as_mut() {
                    Some(g) => g.data_mut().iter_mut().zip(&upstream).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), upstream)?),
                }
                continue;
            }
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match grads[var.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => grads[var.0] = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, idx: usize, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want = (
                    self.wants(*input),
                    self.wants(*kernel),
                    bias.is_some_and(|b| self.wants(b)),
                );
                let g = conv::backward(geom, self.value(*input).data(), self.value(*kernel).data(), dy, want);
                if let Some(mut dx) = g.input {
                    if self.fault == Some(Fault::ConvBackward) {
                        dx.iter_mut().for_each(|v| *v *= 1.5);
                    }
                    out.push((*input, dx));
                }
                if let Some(dk) = g.kernel {
                    out.push((*kernel, dk));
                }
                if let (Some(b), Some(db)) = (bias, g.bias) {
                    out.push((*b, db));
                }
            }
            Op::Upsample2x { input } => {
                let [b, c, h, w] = self.value(*input).dims4("upsample2x").expect("recorded 4-D");
                let mut dx = vec![0.0; b * c * h * w];
                for (dst, src) in dx.chunks_mut(h * w).zip(dy.chunks(4 * h * w)) {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                        }
                    }
                }
                out.push((*input, dx));
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let shape = node.value.dims4("batch_norm").expect("recorded 4-D");
                let (b, c, plane) = channel_plane(shape);
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let start = (bi * c + ch) * plane;
                        for i in start..start + plane {
                            dgamma[ch] += dy[i] * normalized[i];
                            dbeta[ch] += dy[i];
                        }
                    }
                }
                if self.wants(*input) {
                    let m = (b * plane) as f64;
                    let mut dx = vec![0.0; dy.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let k = g[ch] * inv_std[ch] / m;
                            let start = (bi * c + ch) * plane;
                            for i in start..start + plane {
                                dx[i] = k * (m * dy[i] - dbeta[ch] - normalized[i] * dgamma[ch]);
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let shape = node.value.dims4("batch_norm").expect("recorded 4-D");
                let (b, c, plane) = channel_plane(shape);
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; dy.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let start = (bi * c + ch) * plane;
                        for i in start..start + plane {
                            dgamma[ch] += dy[i] * normalized[i];
                            dbeta[ch] += dy[i];
                            dx[i] = dy[i] * g[ch] * inv_std[ch];
                        }
                    }
                }
                out.push((*input, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Prelu { input, slope } => {
                let x = self.value(*input);
                let a = self.value(*slope).data();
                let c = a.len();
                let plane: usize = x.shape()[2..].iter().product();
                let mut dx = vec![0.0; dy.len()];
                let mut da = vec![0.0; c];
                for (i, (&v, &g)) in x.data().iter().zip(dy).enumerate() {
                    let ch = (i / plane) % c;
                    if v > 0.0 {
                        dx[i] = g;
                    } else {
                        dx[i] = a[ch] * g;
                        da[ch] += v * g;
                    }
                }
                out.push((*input, dx));
                out.push((*slope, da));
            }
            Op::Activation { input, kind } => {
                let y = node.value.data();
                let dx = match kind {
                    Activation::Sigmoid => y.iter().zip(dy).map(|(s, g)| g * s * (1.0 - s)).collect(),
                    Activation::Relu => self
                        .value(*input)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                };
                out.push((*input, dx));
            }
            Op::Softmax { input } => {
                let shape = node.value.dims4("softmax").expect("recorded 4-D");
                let (b, c, plane) = channel_plane(shape);
                let y = node.value.data();
                let mut dx = vec![0.0; dy.len()];
                for bi in 0..b {
                    let base = bi * c * plane;
                    for p in 0..plane {
                        let dot: f64 = (0..c)
                            .map(|ch| dy[base + ch * plane + p] * y[base + ch * plane + p])
                            .sum();
                        for ch in 0..c {
                            let i = base + ch * plane + p;
                            dx[i] = y[i] * (dy[i] - dot);
                        }
                    }
                }
                out.push((*input, dx));
            }
            Op::GlobalAvgPool { input } => {
                let x = self.value(*input);
                let plane: usize = x.shape()[2..].iter().product();
                let dx = (0..x.len()).map(|i| dy[i / plane] / plane as f64).collect();
                out.push((*input, dx));
            }
            Op::Dense { input, weights, bias } => {
                let x = self.value(*input);
                let w = self.value(*weights);
                let (b, f) = (x.shape()[0], x.shape()[1]);
                let g = w.shape()[1];
                let (xd, wd) = (x.data(), w.data());
                if self.wants(*input) {
                    let mut dx = vec![0.0; b * f];
                    for bi in 0..b {
                        for i in 0..f {
                            dx[bi * f + i] = (0..g).map(|j| dy[bi * g + j] * wd[i * g + j]).sum();
                        }
                    }
                    out.push((*input, dx));
                }
                let mut dw = vec![0.0; f * g];
                for i in 0..f {
                    for j in 0..g {
                        dw[i * g + j] = (0..b).map(|bi| xd[bi * f + i] * dy[bi * g + j]).sum();
                    }
                }
                out.push((*weights, dw));
                let db = (0..g).map(|j| (0..b).map(|bi| dy[bi * g + j]).sum()).collect();
                out.push((*bias, db));
            }
            Op::Add { a, b } => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.to_vec()));
            }
            Op::Concat { a, b } => {
                let [bx, cx, h, w] = self.value(*a).dims4("concat").expect("recorded 4-D");
                let cy = self.value(*b).shape()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(bx * cx * plane);
                let mut db = Vec::with_capacity(bx * cy * plane);
                for chunk in dy.chunks((cx + cy) * plane) {
                    da.extend_from_slice(&chunk[..cx * plane]);
                    db.extend_from_slice(&chunk[cx * plane..]);
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Mul { a, b } => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, dy.iter().zip(y).map(|(g, v)| g * v).collect()));
                out.push((*b, dy.iter().zip(x).map(|(g, v)| g * v).collect()));
            }
            Op::ChannelScale { input, scale } => {
                let x = self.value(*input);
                let s = self.value(*scale).data();
                let plane: usize = x.shape()[2..].iter().product();
                if self.wants(*input) {
                    let dx = dy.iter().enumerate().map(|(i, g)| g * s[i / plane]).collect();
                    out.push((*input, dx));
                }
                let ds = x
                    .data()
                    .chunks(plane)
                    .zip(dy.chunks(plane))
                    .map(|(xp, gp)| xp.iter().zip(gp).map(|(a, b)| a * b).sum())
                    .collect();
                out.push((*scale, ds));
            }
            Op::Sum { input } => {
                out.push((*input, vec![dy[0]; self.value(*input).len()]));
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let upstream =
                    Tensor::new(node.value.shape().to_vec(), dy.to_vec()).expect("upstream matches recorded output");
                for (v, g) in inputs.iter().zip(backward(&values, &upstream)) {
                    if let Some(g) = g {
                        out.push((*v, g));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    Add,
    ConcatChannels,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
