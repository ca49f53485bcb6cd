//! The multi-subnetwork counting network.
//!
//! A shared front-end feeds `N` density-specific subnetworks. For `N >= 2` their
//! single-channel outputs are weighted by a pooled classifier and fused into one map.

use pandense_tensor::{BatchNormStats, NormMode, ParamSet, PoolKind, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Result};

pub const MAX_LEVELS: usize = 4;

/// Per-level subnetwork layers as `(kernel, channels)`, at full width.
pub const SUBNET_CONFIGS: [[(usize, usize); 5]; MAX_LEVELS] = [
    [(9, 384), (9, 256), (7, 128), (5, 64), (1, 1)],
    [(7, 256), (7, 128), (5, 64), (3, 32), (1, 1)],
    [(5, 128), (5, 64), (3, 32), (3, 16), (1, 1)],
    [(5, 128), (5, 64), (3, 32), (3, 16), (1, 1)],
];

/// Fusion layers before the skip concatenation, at full width.
pub const FUSION_CONFIG: [(usize, usize); 3] = [(7, 64), (5, 32), (3, 32)];

/// One front-end stage: a 3x3 convolution with BN and ReLU, or a 2x2 max pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FenLayer {
    Conv(usize),
    Pool,
}

impl Serialize for FenLayer {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Conv(c) => s.serialize_u64(*c as u64),
            Self::Pool => s.serialize_str("M"),
        }
    }
}

impl<'de> Deserialize<'de> for FenLayer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Conv(usize),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Conv(c) if c > 0 => Ok(Self::Conv(c)),
            Raw::Tag(t) if t == "M" => Ok(Self::Pool),
            _ => Err(serde::de::Error::custom("front-end layers are positive channel counts or \"M\"")),
        }
    }
}

pub fn desk_front_end() -> Vec<FenLayer> {
    use FenLayer::*;
    vec![Conv(16), Conv(16), Pool, Conv(32), Conv(32), Pool]
}

/// The first ten convolutions of VGG-16 (randomly initialized), downsampling by 8.
pub fn vgg_front_end() -> Vec<FenLayer> {
    use FenLayer::*;
    vec![
        Conv(64), Conv(64), Pool, Conv(128), Conv(128), Pool,
        Conv(256), Conv(256), Conv(256), Pool, Conv(512), Conv(512), Conv(512),
    ]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SppPool {
    #[default]
    Avg,
    Max,
}

/// How the classifier weights `w` scale the subnetwork maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FelMode {
    /// `Y_i * (1 + w_i)`.
    #[default]
    Enhanced,
    /// `Y_i * w_i`.
    Plain,
    /// No classifier: every map is scaled by `1 + 1/N`.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    #[serde(rename = "N")]
    pub levels: usize,
    pub channel_scale: f64,
    pub input_channels: usize,
    pub fen_channels: Vec<FenLayer>,
    pub spp_scales: Vec<usize>,
    pub spp_pool: SppPool,
    pub fel_mode: FelMode,
    /// Concatenate the raw subnetwork maps before the last fusion convolution.
    pub skip: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            levels: 2,
            channel_scale: 0.125,
            input_channels: 1,
            fen_channels: desk_front_end(),
            spp_scales: vec![1, 2, 3],
            spp_pool: SppPool::Avg,
            fel_mode: FelMode::Enhanced,
            skip: true,
        }
    }
}

impl ModelSpec {
    pub fn with_levels(levels: usize) -> Self {
        Self { levels, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_LEVELS).contains(&self.levels) {
            return invalid(format!("N must be in 1..={MAX_LEVELS}, got {}", self.levels));
        }
        if !(self.channel_scale > 0.0 && self.channel_scale.is_finite()) {
            return invalid(format!("channel_scale must be positive, got {}", self.channel_scale));
        }
        if self.input_channels != 1 && self.input_channels != 3 {
            return invalid(format!("input_channels must be 1 or 3, got {}", self.input_channels));
        }
        if !self.fen_channels.iter().any(|l| matches!(l, FenLayer::Conv(_))) {
            return invalid("front-end needs at least one convolution");
        }
        if self.spp_scales.is_empty() || self.spp_scales.contains(&0) {
            return invalid(format!("spp_scales must be non-empty positive grids, got {:?}", self.spp_scales));
        }
        Ok(())
    }

    /// Scaled channel count, never below one.
    pub fn scaled(&self, channels: usize) -> usize {
        ((channels as f64 * self.channel_scale).round() as usize).max(1)
    }

    /// Spatial reduction of the front-end.
    pub fn downsample(&self) -> usize {
        1 << self.fen_channels.iter().filter(|l| **l == FenLayer::Pool).count()
    }

    pub fn fen_out_channels(&self) -> usize {
        self.fen_channels
            .iter()
            .rev()
            .find_map(|l| match l {
                FenLayer::Conv(c) => Some(*c),
                FenLayer::Pool => None,
            })
            .unwrap_or(self.input_channels)
    }

    /// Length of the pooled classifier input: `N * sum(g^2)`.
    pub fn fel_input_dim(&self) -> usize {
        self.levels * self.spp_scales.iter().map(|g| g * g).sum::<usize>()
    }

    pub fn has_fusion(&self) -> bool {
        self.levels >= 2
    }

    pub fn has_classifier(&self) -> bool {
        self.has_fusion() && self.fel_mode != FelMode::Uniform
    }
}

#[derive(Clone, Copy, Debug)]
struct Bn {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: usize,
    bias: Option<usize>,
    bn: Option<Bn>,
    ksize: usize,
    out_channels: usize,
}

#[derive(Clone, Copy, Debug)]
enum FenOp {
    Conv(ConvLayer),
    Pool,
}

/// Named parameter-id groups, in the order they were created.
#[derive(Clone, Debug, Default)]
pub struct ParamGroups {
    pub fen: Vec<usize>,
    pub dan: Vec<Vec<usize>>,
    pub fel: Vec<usize>,
    pub ffn: Vec<usize>,
}

/// Outputs of a full forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Final non-negative density map `[B, 1, H/d, W/d]`.
    pub density: Var,
    /// Subnetwork maps, one `[B, 1, H/d, W/d]` per level.
    pub raw: Vec<Var>,
    /// Classifier softmax `[B, N]`, when the model has one.
    pub weights: Option<Var>,
    /// Per-map multipliers `[B, N]` applied before fusion.
    pub multipliers: Option<Var>,
    pub feature: Var,
}

#[derive(Clone, Debug)]
pub struct PaDNet<T: Scalar = f32> {
    spec: ModelSpec,
    pub params: ParamSet<T>,
    pub stats: Vec<BatchNormStats<T>>,
    stat_names: Vec<String>,
    fen: Vec<FenOp>,
    dan: Vec<Vec<ConvLayer>>,
    fel: Option<(usize, usize)>,
    ffn: Vec<ConvLayer>,
    ffn_out: Option<ConvLayer>,
    groups: ParamGroups,
}

struct Builder<'a, T: Scalar> {
    params: &'a mut ParamSet<T>,
    stats: &'a mut Vec<BatchNormStats<T>>,
    stat_names: &'a mut Vec<String>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    /// He-normal weights; BN layers drop the convolution bias.
    fn conv(&mut self, group: &mut Vec<usize>, name: &str, cin: usize, cout: usize, k: usize, bn: bool) -> ConvLayer {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let weight = self.params.push(format!("{name}.weight"), Tensor::randn(&[cout, cin, k, k], std, &mut self.rng));
        group.push(weight);
        let (bias, bn) = if bn {
            let gamma = self.params.push(format!("{name}.bn.weight"), Tensor::full(&[cout], T::one()));
            let beta = self.params.push(format!("{name}.bn.bias"), Tensor::zeros(&[cout]));
            group.extend([gamma, beta]);
            self.stats.push(BatchNormStats::new(cout));
            self.stat_names.push(format!("{name}.bn"));
            (None, Some(Bn { gamma, beta, stats: self.stats.len() - 1 }))
        } else {
            let b = self.params.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
            group.push(b);
            (Some(b), None)
        };
        ConvLayer { weight, bias, bn, ksize: k, out_channels: cout }
    }
}

impl<T: Scalar> PaDNet<T> {
    /// Builds a model with deterministic initialization from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::new();
        let mut stats = Vec::new();
        let mut stat_names = Vec::new();
        let mut groups = ParamGroups::default();
        let mut b = Builder {
            params: &mut params,
            stats: &mut stats,
            stat_names: &mut stat_names,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };

        let mut fen = Vec::new();
        let mut cin = spec.input_channels;
        for (i, layer) in spec.fen_channels.iter().enumerate() {
            match *layer {
                FenLayer::Conv(c) => {
                    fen.push(FenOp::Conv(b.conv(&mut groups.fen, &format!("fen.{i}"), cin, c, 3, true)));
                    cin = c;
                }
                FenLayer::Pool => fen.push(FenOp::Pool),
            }
        }
        let feat = cin;

        let mut dan = Vec::with_capacity(spec.levels);
        for (j, config) in SUBNET_CONFIGS.iter().take(spec.levels).enumerate() {
            let mut group = Vec::new();
            let mut layers = Vec::new();
            let mut c = feat;
            for (i, &(k, out)) in config.iter().enumerate() {
                let last = i + 1 == config.len();
                let out = if last { 1 } else { spec.scaled(out) };
                layers.push(b.conv(&mut group, &format!("dan.{j}.{i}"), c, out, k, !last));
                c = out;
            }
            dan.push(layers);
            groups.dan.push(group);
        }

        let mut fel = None;
        let mut ffn = Vec::new();
        let mut ffn_out = None;
        if spec.has_fusion() {
            if spec.has_classifier() {
                let (fi, n) = (spec.fel_input_dim(), spec.levels);
                let std = (2.0 / fi as f64).sqrt();
                let w = b.params.push("fel.fc.weight", Tensor::randn(&[n, fi], std, &mut b.rng));
                let bias = b.params.push("fel.fc.bias", Tensor::zeros(&[n]));
                groups.fel.extend([w, bias]);
                fel = Some((w, bias));
            }
            let mut c = spec.levels;
            for (i, &(k, out)) in FUSION_CONFIG.iter().enumerate() {
                let out = spec.scaled(out);
                ffn.push(b.conv(&mut groups.ffn, &format!("ffn.{i}"), c, out, k, true));
                c = out;
            }
            if spec.skip {
                c += spec.levels;
            }
            ffn_out = Some(b.conv(&mut groups.ffn, "ffn.out", c, 1, 1, false));
        }

        Ok(Self { spec: spec.clone(), params, stats, stat_names, fen, dan, fel, ffn, ffn_out, groups })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn levels(&self) -> usize {
        self.spec.levels
    }

    pub fn groups(&self) -> &ParamGroups {
        &self.groups
    }

    /// Scalar count of trainable parameters.
    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }

    /// Runs one convolution block. The zero bias of BN-backed layers is a constant.
    fn conv(&mut self, tape: &mut Tape<T>, layer: ConvLayer, x: Var, mode: NormMode) -> Result<Var> {
        let w = tape.param(layer.weight, self.params.tensor(layer.weight));
        let b = match layer.bias {
            Some(id) => tape.param(id, self.params.tensor(id)),
            None => tape.constant(Tensor::zeros(&[layer.out_channels])),
        };
        let y = tape.conv2d(x, w, b, (layer.ksize - 1) / 2)?;
        let Some(bn) = layer.bn else { return Ok(y) };
        let g = tape.param(bn.gamma, self.params.tensor(bn.gamma));
        let beta = tape.param(bn.beta, self.params.tensor(bn.beta));
        let y = tape.batch_norm2d(y, g, beta, &mut self.stats[bn.stats], mode)?;
        Ok(tape.relu(y)?)
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let s = tape.shape(x);
        let d = self.spec.downsample();
        if s.len() != 4 || s[1] != self.spec.input_channels {
            return invalid(format!("expected [B, {}, H, W] input, got {s:?}", self.spec.input_channels));
        }
        if s[2] % d != 0 || s[3] % d != 0 {
            return invalid(format!("input {}x{} is not divisible by {d}; pad it first", s[2], s[3]));
        }
        Ok(())
    }

    /// Shared base feature.
    pub fn fen_forward(&mut self, tape: &mut Tape<T>, x: Var, mode: NormMode) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut h = x;
        for op in self.fen.clone() {
            h = match op {
                FenOp::Conv(layer) => self.conv(tape, layer, h, mode)?,
                FenOp::Pool => tape.max_pool2(h)?,
            };
        }
        Ok(h)
    }

    /// Map of subnetwork `level` from the base feature.
    pub fn subnet_forward(&mut self, tape: &mut Tape<T>, level: usize, feature: Var, mode: NormMode) -> Result<Var> {
        let layers = self.dan.get(level).cloned().ok_or_else(|| {
            crate::Error::Invalid(format!("level {level} outside 0..{}", self.spec.levels))
        })?;
        let mut h = feature;
        for layer in layers {
            h = self.conv(tape, layer, h, mode)?;
        }
        Ok(h)
    }

    pub fn dan_forward(&mut self, tape: &mut Tape<T>, feature: Var, mode: NormMode) -> Result<Vec<Var>> {
        (0..self.spec.levels).map(|j| self.subnet_forward(tape, j, feature, mode)).collect()
    }

    /// Front-end plus one subnetwork.
    pub fn level_forward(&mut self, tape: &mut Tape<T>, level: usize, x: Var, mode: NormMode) -> Result<Var> {
        let f = self.fen_forward(tape, x, mode)?;
        self.subnet_forward(tape, level, f, mode)
    }

    /// Pooled classifier input `[B, N * sum(g^2)]`: level-major, then scale, then
    /// row-major cells.
    pub fn spp_features(&self, tape: &mut Tape<T>, raw: &[Var]) -> Result<Var> {
        let kind = match self.spec.spp_pool {
            SppPool::Avg => PoolKind::Avg,
            SppPool::Max => PoolKind::Max,
        };
        let mut parts = Vec::with_capacity(raw.len() * self.spec.spp_scales.len());
        for &y in raw {
            let b = tape.shape(y)[0];
            for &g in &self.spec.spp_scales {
                let p = tape.region_pool(y, g, kind)?;
                parts.push(tape.reshape(p, &[b, g * g])?);
            }
        }
        Ok(tape.concat(&parts)?)
    }

    /// Classifier weights `[B, N]`, or `None` without a classifier.
    pub fn fel_weights(&self, tape: &mut Tape<T>, raw: &[Var]) -> Result<Option<Var>> {
        let Some((w, b)) = self.fel else { return Ok(None) };
        let v = self.spp_features(tape, raw)?;
        let wv = tape.param(w, self.params.tensor(w));
        let bv = tape.param(b, self.params.tensor(b));
        let logits = tape.linear(v, wv, bv)?;
        Ok(Some(tape.softmax(logits)?))
    }

    /// Multipliers `[B, N]` for the raw maps and the classifier softmax they came from.
    pub fn fel_forward(&self, tape: &mut Tape<T>, raw: &[Var]) -> Result<(Option<Var>, Var)> {
        let n = raw.len();
        let b = tape.shape(raw[0])[0];
        let weights = self.fel_weights(tape, raw)?;
        let mult = match (self.spec.fel_mode, weights) {
            (FelMode::Enhanced, Some(w)) => tape.add_scalar(w, T::one()),
            (FelMode::Plain, Some(w)) => w,
            _ => tape.constant(Tensor::full(&[b, n], T::one() + T::one() / T::of(n as f64))),
        };
        Ok((weights, mult))
    }

    /// Fuses the scaled maps (`[B, N, h, w]`) with an optional raw skip into one map.
    pub fn ffn_forward(&mut self, tape: &mut Tape<T>, refined: Var, raw_cat: Var, mode: NormMode) -> Result<Var> {
        let mut h = refined;
        for layer in self.ffn.clone() {
            h = self.conv(tape, layer, h, mode)?;
        }
        if self.spec.skip {
            h = tape.concat(&[h, raw_cat])?;
        }
        let out = self.ffn_out.expect("fusion present for N >= 2");
        let y = self.conv(tape, out, h, mode)?;
        Ok(tape.relu(y)?)
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: NormMode) -> Result<Forward> {
        let feature = self.fen_forward(tape, x, mode)?;
        let raw = self.dan_forward(tape, feature, mode)?;
        if !self.spec.has_fusion() {
            let density = tape.relu(raw[0])?;
            return Ok(Forward { density, raw, weights: None, multipliers: None, feature });
        }
        let (weights, mult) = self.fel_forward(tape, &raw)?;
        let raw_cat = tape.concat(&raw)?;
        let refined = tape.scale_channels(raw_cat, mult)?;
        let density = self.ffn_forward(tape, refined, raw_cat, mode)?;
        Ok(Forward { density, raw, weights, multipliers: Some(mult), feature })
    }

    /// Eval-mode density maps for a batch, without recording gradients.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, x, NormMode::Eval)?;
        Ok(tape.value(out.density).clone())
    }

    /// Names of every trainable tensor that gets an all-zero gradient from one
    /// train-mode pass on random input and target. Running statistics are restored.
    pub fn dead_parameters(&self, side: usize, seed: u64) -> Result<Vec<String>> {
        let mut probe = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.spec.input_channels;
        let x = Tensor::uniform(&[2, c, side, side], 0.0, 1.0, &mut rng);
        let d = self.spec.downsample();
        let target = Tensor::uniform(&[2, 1, side / d, side / d], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = probe.forward(&mut tape, xv, NormMode::Train)?;
        let tv = tape.constant(target);
        let mut loss = tape.mse_loss(out.density, tv)?;
        if let Some(w) = out.weights {
            let ce = tape.cross_entropy(w, &[0, 1 % self.spec.levels])?;
            loss = tape.add(loss, ce)?;
        }
        tape.backward(loss)?;
        let mut dead = Vec::new();
        for (id, p) in self.params.iter().enumerate() {
            let live = tape
                .param_vars()
                .iter()
                .find(|(pid, _)| *pid == id)
                .and_then(|&(_, v)| tape.grad(v))
                .is_some_and(|g| g.iter().any(|&v| v != T::zero()));
            if !live {
                dead.push(p.name.clone());
            }
        }
        Ok(dead)
    }

    /// Parameters and running statistics as `(name, shape, values)`, parameters first.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<T>)> =
            self.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data().to_vec())).collect();
        for (name, s) in self.stat_names.iter().zip(&self.stats) {
            out.push((format!("{name}.running_mean"), vec![s.mean.len()], s.mean.clone()));
            out.push((format!("{name}.running_var"), vec![s.var.len()], s.var.clone()));
        }
        out
    }

    /// Overwrites parameters and running statistics from `named_tensors` output.
    pub fn load_named(&mut self, entries: &[(String, Vec<usize>, Vec<T>)]) -> Result<()> {
        let expected = self.named_tensors();
        if entries.len() != expected.len() {
            return invalid(format!("{} tensors given, model has {}", entries.len(), expected.len()));
        }
        for ((name, shape, values), (ename, eshape, _)) in entries.iter().zip(&expected) {
            if name != ename || shape != eshape || values.len() != shape.iter().product::<usize>() {
                return invalid(format!("tensor {name} {shape:?} does not match model tensor {ename} {eshape:?}"));
            }
        }
        let np = self.params.len();
        for (id, (_, _, values)) in entries[..np].iter().enumerate() {
            self.params.get_mut(id).value.data_mut().copy_from_slice(values);
        }
        for (s, pair) in self.stats.iter_mut().zip(entries[np..].chunks(2)) {
            s.mean.copy_from_slice(&pair[0].2);
            s.var.copy_from_slice(&pair[1].2);
        }
        Ok(())
    }

    /// Copies parameter values and statistics of the given groups from `other`.
    pub fn copy_from(&mut self, other: &PaDNet<T>, ids: &[usize]) {
        for &id in ids {
            let src = other.params.tensor(id).data().to_vec();
            self.params.get_mut(id).value.data_mut().copy_from_slice(&src);
        }
        for (i, name) in self.stat_names.iter().enumerate() {
            let owner = ids.iter().any(|&id| {
                let pname = &self.params.get(id).name;
                pname.strip_suffix(".weight").or_else(|| pname.strip_suffix(".bias")) == Some(name.as_str())
            });
            if owner {
                self.stats[i] = other.stats[i].clone();
            }
        }
    }

    /// Same architecture in another precision.
    pub fn cast<U: Scalar>(&self) -> PaDNet<U> {
        PaDNet {
            spec: self.spec.clone(),
            params: self.params.cast(),
            stats: self.stats.iter().map(BatchNormStats::cast).collect(),
            stat_names: self.stat_names.clone(),
            fen: self.fen.clone(),
            dan: self.dan.clone(),
            fel: self.fel,
            ffn: self.ffn.clone(),
            ffn_out: self.ffn_out,
            groups: self.groups.clone(),
        }
    }
}

/// Parameter count of a model built from `spec`, without allocating weights beyond
/// one build.
pub fn parameter_count(spec: &ModelSpec) -> Result<usize> {
    Ok(PaDNet::<f32>::build(spec, 0)?.parameter_count())
}

/// The `channel_scale` in `candidates` whose model has the parameter count closest to
/// `target`.
pub fn match_channel_scale(base: &ModelSpec, target: usize, candidates: &[f64]) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for &s in candidates {
        let count = parameter_count(&ModelSpec { channel_scale: s, ..base.clone() })?;
        let better = best.is_none_or(|(_, c)| count.abs_diff(target) < c.abs_diff(target));
        if better {
            best = Some((s, count));
        }
    }
    best.ok_or_else(|| crate::Error::Invalid("no channel_scale candidates".into()))
}
