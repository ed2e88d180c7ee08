//! The attention-guided residual 2D UNet.
//!
//! Topology for `depth = 3` and base width `F`:
//!
//! ```text
//! enc0  res(in → F)   ─────────────────────────────────────────┐ skip
//! down0 conv s2 (F → 2F)                                      │
//! enc1  res(2F → 2F)  ───────────────────────────┐ skip        │
//! down1 conv s2 (2F → 4F)                        │             │
//! enc2  res(4F → 4F)  ─────────────┐ skip        │             │
//! down2 conv s2 (4F → 8F)          │             │             │
//! bottleneck res(8F → 8F)          │             │             │
//! dec2  up2x, conv2x2 (8F → 4F), concat, SE, res(8F → 4F)      │
//! dec1  up2x, conv2x2 (4F → 2F), concat, SE, res(4F → 2F)      │
//! dec0  up2x, conv2x2 (2F → F),  concat, SE, res(2F → F) ──────┘
//! head  conv1x1 (F → C), softmax
//! ```
//!
//! The SE blocks exist only for [`Variant::MinorModsPlusAttention`].

pub mod checkpoint;
mod padding;

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use padding::{crop, pad_to_valid, CropRecord};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormConfig, BatchNormState, Graph, Mode, Padding, Tensor, Var};

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Approximation of the original UNet: no residual shortcuts, ReLU,
    /// 2×2 stride-2 downsampling convolutions.
    PlainUnet,
    /// Residual units, 3×3 strided convolutions, PReLU and batch norm.
    MinorMods,
    /// `MinorMods` plus an SE block after every decoder concatenation.
    MinorModsPlusAttention,
}

impl Variant {
    pub fn has_attention(self) -> bool {
        self == Variant::MinorModsPlusAttention
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::PlainUnet => "plain_unet (approximation)",
            Variant::MinorMods => "minor_mods",
            Variant::MinorModsPlusAttention => "minor_mods_plus_attention",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub base_width: usize,
    pub se_reduction: usize,
    pub variant: Variant,
    pub input_noise_sigma: f64,
    pub batch_norm: BatchNormConfig,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            in_channels: 4,
            num_classes: 4,
            depth: 3,
            base_width: 32,
            se_reduction: 16,
            variant: Variant::MinorModsPlusAttention,
            input_noise_sigma: 0.01,
            batch_norm: BatchNormConfig::default(),
        }
    }
}

/// Smallest SE bottleneck width.
pub const SE_MIN_WIDTH: usize = 4;

impl NetworkSpec {
    pub fn with_width(base_width: usize, variant: Variant) -> Self {
        Self {
            base_width,
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !(1..=6).contains(&self.depth) {
            return bad(format!("depth must lie in 1..=6, got {}", self.depth));
        }
        if self.base_width == 0 {
            return bad("base_width must be positive".into());
        }
        if self.se_reduction == 0 {
            return bad("se_reduction must be positive".into());
        }
        if !(self.input_noise_sigma >= 0.0) {
            return bad(format!(
                "input_noise_sigma must be >= 0, got {}",
                self.input_noise_sigma
            ));
        }
        let bn = self.batch_norm;
        if !(bn.epsilon > 0.0) || !(0.0..1.0).contains(&bn.momentum) {
            return bad(format!("invalid batch norm config {bn:?}"));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// SE bottleneck width for `channels` input channels.
    pub fn se_hidden(&self, channels: usize) -> usize {
        (channels / self.se_reduction).max(SE_MIN_WIDTH)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum ParamKind {
    /// Normal with variance `gain / fan_in`.
    Kernel {
        fan_in: usize,
        gain: f64,
    },
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
    Slope,
}

impl ParamKind {
    fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// One named tensor in the layer enumeration of a spec.
#[derive(Clone, Debug)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub(crate) kind: ParamKind,
}

impl LayerEntry {
    pub fn trainable(&self) -> bool {
        self.kind.trainable()
    }
}

struct Enumerator<'a> {
    spec: &'a NetworkSpec,
    entries: Vec<LayerEntry>,
}

impl Enumerator<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind) {
        self.entries.push(LayerEntry { name, shape, kind });
    }

    /// `gain` is 2 for kernels feeding a rectifier and 1 for linear paths.
    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, bias: bool, gain: f64) {
        self.push(
            format!("{prefix}.weight"),
            vec![cout, cin, k, k],
            ParamKind::Kernel {
                fan_in: cin * k * k,
                gain,
            },
        );
        if bias {
            self.push(format!("{prefix}.bias"), vec![cout], ParamKind::Bias);
        }
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.gamma"), vec![c], ParamKind::Gamma);
        self.push(format!("{prefix}.beta"), vec![c], ParamKind::Beta);
        self.push(format!("{prefix}.running_mean"), vec![c], ParamKind::RunningMean);
        self.push(format!("{prefix}.running_var"), vec![c], ParamKind::RunningVar);
    }

    fn residual(&mut self, prefix: &str, cin: usize, cout: usize) {
        let plain = self.spec.variant == Variant::PlainUnet;
        self.conv(&format!("{prefix}.conv1"), cin, cout, 3, false, 2.0);
        self.bn(&format!("{prefix}.bn1"), cout);
        if !plain {
            self.push(format!("{prefix}.act1.slope"), vec![cout], ParamKind::Slope);
        }
        self.conv(&format!("{prefix}.conv2"), cout, cout, 3, false, 2.0);
        self.bn(&format!("{prefix}.bn2"), cout);
        if !plain {
            self.push(format!("{prefix}.act2.slope"), vec![cout], ParamKind::Slope);
            if cin != cout {
                self.conv(&format!("{prefix}.shortcut"), cin, cout, 1, true, 1.0);
            }
        }
    }

    fn se(&mut self, prefix: &str, c: usize) {
        let hidden = self.spec.se_hidden(c);
        self.push(
            format!("{prefix}.fc1.weight"),
            vec![c, hidden],
            ParamKind::Kernel { fan_in: c, gain: 2.0 },
        );
        self.push(format!("{prefix}.fc1.bias"), vec![hidden], ParamKind::Bias);
        self.push(
            format!("{prefix}.fc2.weight"),
            vec![hidden, c],
            ParamKind::Kernel {
                fan_in: hidden,
                gain: 1.0,
            },
        );
        self.push(format!("{prefix}.fc2.bias"), vec![c], ParamKind::Bias);
    }
}

/// Every tensor the spec needs, in a fixed order.
pub fn layer_enumeration(spec: &NetworkSpec) -> Vec<LayerEntry> {
    let mut e = Enumerator {
        spec,
        entries: Vec::new(),
    };
    let down_k = if spec.variant == Variant::PlainUnet { 2 } else { 3 };
    let mut cin = spec.in_channels;
    for level in 0..spec.depth {
        let w = spec.width(level);
        e.residual(&format!("enc{level}"), cin, w);
        e.conv(&format!("down{level}"), w, 2 * w, down_k, true, 1.0);
        cin = 2 * w;
    }
    e.residual("bottleneck", cin, cin);
    for level in (0..spec.depth).rev() {
        let w = spec.width(level);
        e.conv(&format!("dec{level}.up"), 2 * w, w, 2, true, 1.0);
        if spec.variant.has_attention() {
            e.se(&format!("dec{level}.se"), 2 * w);
        }
        e.residual(&format!("dec{level}.res"), 2 * w, w);
    }
    e.conv("head", spec.base_width, spec.num_classes, 1, true, 1.0);
    e.entries
}

/// Named weights and batch-norm running statistics bound to a spec.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidSpec(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(k, _)| !is_running_stat(k))
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    pub fn bn_state(&self, prefix: &str) -> Result<BatchNormState> {
        let mean = self.get(&format!("{prefix}.running_mean"))?.data().to_vec();
        let var = self.get(&format!("{prefix}.running_var"))?.data().to_vec();
        Ok(BatchNormState::new(mean, var))
    }

    /// Checks names and shapes against the spec's layer enumeration.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = layer_enumeration(spec);
        for entry in &expected {
            let t = self.get(&entry.name)?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::shape("parameter", &entry.shape, t.shape()));
            }
        }
        if expected.len() != self.tensors.len() {
            let known: std::collections::BTreeSet<&str> = expected.iter().map(|e| e.name.as_str()).collect();
            let extra: Vec<&str> = self
                .tensors
                .keys()
                .map(String::as_str)
                .filter(|k| !known.contains(k))
                .collect();
            return Err(Error::InvalidSpec(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }
}

/// Deterministically initializes every tensor of `spec` from `seed`.
///
/// Kernels are fan-in normal: He scaling before rectifiers, LeCun scaling
/// on linear paths (down/up convolutions, shortcuts, head). PReLU slopes start at 0.25,
/// batch norm at γ=1, β=0 with running mean 0 and variance 1.
pub fn build(spec: &NetworkSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    for entry in layer_enumeration(spec) {
        let t = match entry.kind {
            ParamKind::Kernel { fan_in, gain } => Tensor::randn(&entry.shape, (gain / fan_in as f64).sqrt(), &mut rng),
            ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => Tensor::zeros(&entry.shape),
            ParamKind::Gamma | ParamKind::RunningVar => Tensor::full(&entry.shape, 1.0),
            ParamKind::Slope => Tensor::full(&entry.shape, 0.25),
        };
        if params.insert(entry.name.clone(), t).is_some() {
            return Err(Error::InvalidSpec(format!("duplicate layer name {}", entry.name)));
        }
    }
    Ok(params)
}

/// SE gate parameters, already recorded in a graph.
#[derive(Clone, Copy, Debug)]
pub struct SeWeights {
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

/// Squeeze-and-excitation: rescales each channel by
/// `sigmoid(fc2(relu(fc1(global_avg_pool(x)))))`.
pub fn se_block(graph: &mut Graph, features: Var, w: &SeWeights) -> Result<Var> {
    let squeezed = graph.global_avg_pool(features)?;
    let hidden = graph.dense(squeezed, w.fc1_weight, w.fc1_bias)?;
    let hidden = graph.relu(hidden);
    let gate = graph.dense(hidden, w.fc2_weight, w.fc2_bias)?;
    let gate = graph.sigmoid(gate);
    graph.channel_scale(features, gate)
}

/// Result of recording a forward pass.
pub struct ForwardPass {
    /// Per-pixel class probabilities `[B, C, H, W]`.
    pub probabilities: Var,
    /// Graph leaves bound to each trainable tensor.
    pub params: BTreeMap<String, Var>,
    /// Updated running statistics keyed by batch-norm prefix (train mode only).
    pub bn_updates: BTreeMap<String, BatchNormState>,
}

impl ForwardPass {
    /// Collects leaf gradients by parameter name after `Graph::backward`.
    pub fn gradients(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = graph
                    .grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.value(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

struct Recorder<'a> {
    graph: &'a mut Graph,
    params: &'a ParameterSet,
    spec: &'a NetworkSpec,
    mode: Mode,
    track: bool,
    vars: BTreeMap<String, Var>,
    bn_updates: BTreeMap<String, BatchNormState>,
}

impl Recorder<'_> {
    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = self.params.get(name)?.clone();
        let v = self.graph.leaf(t, self.track);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv(&mut self, x: Var, prefix: &str, stride: usize, pad: Padding, bias: bool) -> Result<Var> {
        let k = self.param(&format!("{prefix}.weight"))?;
        let b = if bias {
            Some(self.param(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        self.graph.conv2d(x, k, b, stride, pad)
    }

    fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mut state = self.params.bn_state(prefix)?;
        let y = self
            .graph
            .batch_norm(x, gamma, beta, &mut state, self.mode, self.spec.batch_norm)?;
        if self.mode == Mode::Train {
            self.bn_updates.insert(prefix.to_string(), state);
        }
        Ok(y)
    }

    fn act(&mut self, x: Var, prefix: &str) -> Result<Var> {
        if self.spec.variant == Variant::PlainUnet {
            Ok(self.graph.relu(x))
        } else {
            let slope = self.param(&format!("{prefix}.slope"))?;
            self.graph.prelu(x, slope)
        }
    }

    /// conv → BN → act, twice, plus shortcut.
    fn residual(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.conv(x, &format!("{prefix}.conv1"), 1, Padding::uniform(1), false)?;
        let h = self.bn(h, &format!("{prefix}.bn1"))?;
        let h = self.act(h, &format!("{prefix}.act1"))?;
        let h = self.conv(h, &format!("{prefix}.conv2"), 1, Padding::uniform(1), false)?;
        let h = self.bn(h, &format!("{prefix}.bn2"))?;
        let h = self.act(h, &format!("{prefix}.act2"))?;
        if self.spec.variant == Variant::PlainUnet {
            return Ok(h);
        }
        let shortcut_name = format!("{prefix}.shortcut");
        let shortcut = if self.params.contains(&format!("{shortcut_name}.weight")) {
            self.conv(x, &shortcut_name, 1, Padding::default(), true)?
        } else {
            x
        };
        self.graph.add(h, shortcut)
    }

    fn se(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = SeWeights {
            fc1_weight: self.param(&format!("{prefix}.fc1.weight"))?,
            fc1_bias: self.param(&format!("{prefix}.fc1.bias"))?,
            fc2_weight: self.param(&format!("{prefix}.fc2.weight"))?,
            fc2_bias: self.param(&format!("{prefix}.fc2.bias"))?,
        };
        se_block(self.graph, x, &w)
    }
}

/// Records the network on `input` (`[B, in_channels, H, W]`, H and W
/// multiples of `2^depth`).
///
/// In train mode Gaussian noise with `spec.input_noise_sigma` is added to
/// the input and batch norm uses batch statistics; `noise` must then be
/// provided. `track_grads` marks parameters as trainable leaves.
pub fn forward_graph(
    graph: &mut Graph,
    params: &ParameterSet,
    spec: &NetworkSpec,
    input: &Tensor,
    mode: Mode,
    track_grads: bool,
    noise: Option<&mut dyn RngCore>,
) -> Result<ForwardPass> {
    let [_, c, h, w] = input.dims4("forward")?;
    if c != spec.in_channels {
        return Err(Error::shape(
            "forward (input channels)",
            input.shape(),
            &[spec.in_channels],
        ));
    }
    let m = spec.spatial_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::InvalidArgument(format!(
            "spatial extents {h}×{w} must be multiples of {m}; pad the input first"
        )));
    }
    let x = match mode {
        Mode::Train if spec.input_noise_sigma > 0.0 => {
            let rng =
                noise.ok_or_else(|| Error::InvalidArgument("train-mode forward needs a noise generator".into()))?;
            let sigma = spec.input_noise_sigma;
            let mut noisy = input.clone();
            for v in noisy.data_mut() {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
            graph.input(noisy)
        }
        _ => graph.input(input.clone()),
    };
    let mut r = Recorder {
        graph,
        params,
        spec,
        mode,
        track: track_grads,
        vars: BTreeMap::new(),
        bn_updates: BTreeMap::new(),
    };
    let down_pad = if spec.variant == Variant::PlainUnet {
        Padding::default()
    } else {
        Padding::uniform(1)
    };
    let mut skips = Vec::with_capacity(spec.depth);
    let mut x = x;
    for level in 0..spec.depth {
        let enc = r.residual(x, &format!("enc{level}"))?;
        skips.push(enc);
        x = r.conv(enc, &format!("down{level}"), 2, down_pad, true)?;
    }
    x = r.residual(x, "bottleneck")?;
    for level in (0..spec.depth).rev() {
        let up = r.graph.upsample2x(x)?;
        let up = r.conv(up, &format!("dec{level}.up"), 1, Padding::low(1), true)?;
        let mut cat = r.graph.concat_channels(up, skips[level])?;
        if spec.variant.has_attention() {
            cat = r.se(cat, &format!("dec{level}.se"))?;
        }
        x = r.residual(cat, &format!("dec{level}.res"))?;
    }
    let logits = r.conv(x, "head", 1, Padding::default(), true)?;
    let probabilities = r.graph.softmax_channels(logits)?;
    Ok(ForwardPass {
        probabilities,
        params: r.vars,
        bn_updates: r.bn_updates,
    })
}

/// Runs the network and returns per-pixel class probabilities.
pub fn forward(
    params: &ParameterSet,
    spec: &NetworkSpec,
    batch: &Tensor,
    mode: Mode,
    rng: Option<&mut dyn RngCore>,
) -> Result<Tensor> {
    let mut graph = Graph::new();
    let pass = forward_graph(&mut graph, params, spec, batch, mode, false, rng)?;
    Ok(graph.value(pass.probabilities).clone())
}

/// Eval-mode inference.
pub fn predict(params: &ParameterSet, spec: &NetworkSpec, batch: &Tensor) -> Result<Tensor> {
    forward(params, spec, batch, Mode::Eval, None)
}

/// Writes train-mode running statistics back into `params`.
pub fn apply_bn_updates(params: &mut ParameterSet, updates: BTreeMap<String, BatchNormState>) -> Result<()> {
    for (prefix, state) in updates {
        let (mean, var) = state
            .into_running()
            .ok_or_else(|| Error::InvalidArgument(format!("no running statistics for {prefix}")))?;
        let c = mean.len();
        params.insert(format!("{prefix}.running_mean"), Tensor::new(vec![c], mean)?);
        params.insert(format!("{prefix}.running_var"), Tensor::new(vec![c], var)?);
    }
    Ok(())
}

#[cfg(test)]
mod tests;
