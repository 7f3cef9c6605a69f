//! Periodic convolution layer, basic periodic block and the two network scales.
//!
//! A periodic convolution wraps the width axis circularly before convolving,
//! so the left-most and right-most table columns are neighbours; the height
//! axis is zero padded. With odd kernels and stride 1 the spatial shape is
//! preserved. [`Periodicity::Flat`] swaps the circular padding for zero
//! padding of the same width, which gives the ablation network.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::elements::{GRID_COLS, GRID_ROWS};
use crate::encoder::CHANNELS;
use crate::error::{Error, Result};
use crate::formula::Representation;
use crate::tensor::{
    conv_output_size, BatchMoments, BatchNormConfig, BnMode, Graph, RunningStats, Scalar, Tensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Regress,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classify => "classify",
            Task::Regress => "regress",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Periodicity {
    /// Width axis wrapped around (left and right edges adjacent).
    Cylindrical,
    /// Plain zero padding.
    Flat,
}

impl fmt::Display for Periodicity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Periodicity::Cylindrical => "cylindrical",
            Periodicity::Flat => "flat",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Reduced,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Full => "full",
            Scale::Reduced => "reduced",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodicConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub periodicity: Periodicity,
}

impl PeriodicConvSpec {
    /// `(height, width)` padding that keeps the spatial shape.
    pub fn padding(&self) -> (usize, usize) {
        ((self.kernel.0 - 1) / 2, (self.kernel.1 - 1) / 2)
    }

    fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::ConfigInvalid("periodic conv channels must be positive".into()));
        }
        if kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::ConfigInvalid(format!("periodic conv kernel must be odd, got {kh}x{kw}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicPeriodicBlockSpec {
    pub in_ch: usize,
    pub inside_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
}

impl BasicPeriodicBlockSpec {
    pub fn uniform(channels: usize, kernel: (usize, usize)) -> Self {
        BasicPeriodicBlockSpec { in_ch: channels, inside_ch: channels, out_ch: channels, kernel }
    }

    fn convs(&self, periodicity: Periodicity) -> [PeriodicConvSpec; 2] {
        [
            PeriodicConvSpec {
                in_channels: self.in_ch,
                out_channels: self.inside_ch,
                kernel: self.kernel,
                periodicity,
            },
            PeriodicConvSpec {
                in_channels: self.inside_ch,
                out_channels: self.out_ch,
                kernel: self.kernel,
                periodicity,
            },
        ]
    }
}

/// Downsampling stage: plain conv + BN + ReLU, then one basic periodic block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl StageSpec {
    fn downsample(out_channels: usize) -> Self {
        StageSpec { out_channels, kernel: (2, 4), stride: (1, 2), padding: (0, 3) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub task: Task,
    pub periodicity: Periodicity,
    pub scale: Scale,
    #[serde(default)]
    pub representation: Representation,
    /// `[channels, rows, cols]` of the encoded table.
    pub input_shape: [usize; 3],
    pub stem_channels: usize,
    pub stem_kernel: (usize, usize),
    pub stem_blocks: usize,
    pub block_kernel: (usize, usize),
    pub stages: Vec<StageSpec>,
    pub fc_widths: Vec<usize>,
    pub batch_norm: BatchNormConfig,
    pub seed: u64,
}

impl NetworkConfig {
    /// The full stack: stem, ten blocks at 10 channels, six downsampling stages to 70 channels.
    pub fn full(task: Task, periodicity: Periodicity, seed: u64) -> Self {
        NetworkConfig {
            task,
            periodicity,
            scale: Scale::Full,
            representation: Representation::Absolute,
            input_shape: [CHANNELS, GRID_ROWS, GRID_COLS],
            stem_channels: 10,
            stem_kernel: (1, 1),
            stem_blocks: 10,
            block_kernel: (3, 3),
            stages: (2..=7).map(|i| StageSpec::downsample(10 * i)).collect(),
            fc_widths: vec![100, 100],
            batch_norm: BatchNormConfig::default(),
            seed,
        }
    }

    /// Desk-scale subset: two stem blocks and three stages to 40 channels.
    pub fn reduced(task: Task, periodicity: Periodicity, seed: u64) -> Self {
        NetworkConfig {
            scale: Scale::Reduced,
            stem_blocks: 2,
            stages: (2..=4).map(|i| StageSpec::downsample(10 * i)).collect(),
            ..NetworkConfig::full(task, periodicity, seed)
        }
    }

    pub fn new(task: Task, periodicity: Periodicity, scale: Scale, seed: u64) -> Self {
        match scale {
            Scale::Full => Self::full(task, periodicity, seed),
            Scale::Reduced => Self::reduced(task, periodicity, seed),
        }
    }

    /// `(channels, height, width)` after the stem and after each stage.
    pub fn shape_trace(&self) -> Result<Vec<(usize, usize, usize)>> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::ConfigInvalid(format!("input shape {:?}", self.input_shape)));
        }
        let mut trace = vec![(self.stem_channels, h, w)];
        let (mut h, mut w) = (h, w);
        for (i, s) in self.stages.iter().enumerate() {
            let (Some(nh), Some(nw)) = (
                conv_output_size(h, s.kernel.0, s.stride.0, s.padding.0),
                conv_output_size(w, s.kernel.1, s.stride.1, s.padding.1),
            ) else {
                return Err(Error::ConfigInvalid(format!("stage {} does not fit a {h}x{w} input", i + 1)));
            };
            (h, w) = (nh, nw);
            trace.push((s.out_channels, h, w));
        }
        Ok(trace)
    }

    /// Width of the flattened feature vector entering the first FC layer.
    pub fn flat_features(&self) -> Result<usize> {
        let &(c, h, w) = self.shape_trace()?.last().expect("non-empty trace");
        c.checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::ConfigInvalid("flattened width overflows".into()))
    }

    /// Number of trainable scalars the config instantiates, computed without
    /// allocating. `None` on arithmetic overflow.
    pub fn param_count(&self) -> Option<u128> {
        let conv = |cin: usize, cout: usize, (kh, kw): (usize, usize)| {
            (cin as u128)
                .checked_mul(cout as u128)?
                .checked_mul(kh as u128)?
                .checked_mul(kw as u128)?
                .checked_add(cout as u128)
        };
        let bn = |c: usize| (c as u128).checked_mul(2);
        let block = |c: usize| conv(c, c, self.block_kernel)?.checked_add(bn(c)?)?.checked_mul(2);
        let mut total = conv(self.input_shape[0], self.stem_channels, self.stem_kernel)?;
        total = total.checked_add(block(self.stem_channels)?.checked_mul(self.stem_blocks as u128)?)?;
        let mut c = self.stem_channels;
        for s in &self.stages {
            total = total.checked_add(conv(c, s.out_channels, s.kernel)?)?;
            total = total.checked_add(bn(s.out_channels)?)?.checked_add(block(s.out_channels)?)?;
            c = s.out_channels;
        }
        let mut width = self.flat_features().ok()?;
        for &f in self.fc_widths.iter().chain(std::iter::once(&1)) {
            total = total.checked_add((width as u128).checked_mul(f as u128)?.checked_add(f as u128)?)?;
            width = f;
        }
        Some(total)
    }

    /// Number of batch-norm layers (each carries running mean and variance).
    pub fn batch_norm_count(&self) -> usize {
        2 * self.stem_blocks + 3 * self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape[0] != CHANNELS {
            return Err(Error::ConfigInvalid(format!("input must have {CHANNELS} channels")));
        }
        let stem = PeriodicConvSpec {
            in_channels: self.input_shape[0],
            out_channels: self.stem_channels,
            kernel: self.stem_kernel,
            periodicity: self.periodicity,
        };
        stem.validate()?;
        BasicPeriodicBlockSpec::uniform(1, self.block_kernel).convs(self.periodicity)[0].validate()?;
        for s in &self.stages {
            let (kh, kw) = s.kernel;
            if s.out_channels == 0 || kh == 0 || kw == 0 || s.stride.0 == 0 || s.stride.1 == 0 {
                return Err(Error::ConfigInvalid(format!("bad stage {s:?}")));
            }
        }
        if self.fc_widths.contains(&0) {
            return Err(Error::ConfigInvalid("FC widths must be positive".into()));
        }
        let bn = &self.batch_norm;
        if bn.eps.is_nan() || bn.eps <= 0.0 || !(0.0..=1.0).contains(&bn.momentum) {
            return Err(Error::ConfigInvalid(format!("bad batch norm settings {bn:?}")));
        }
        self.shape_trace().map(|_| ())
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct BnRef {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockRef {
    spec: BasicPeriodicBlockSpec,
    conv1: ConvRef,
    bn1: BnRef,
    conv2: ConvRef,
    bn2: BnRef,
}

#[derive(Debug, Clone)]
enum Layer {
    PeriodicConv { spec: PeriodicConvSpec, conv: ConvRef },
    Block(BlockRef),
    Downsample { stage: StageSpec, conv: ConvRef, bn: BnRef },
    Flatten,
    Dense { conv: ConvRef, relu: bool },
}

/// Parameter vars created on a graph by [`Network::forward`], plus the
/// batch statistics produced by train-mode batch norms.
pub struct Forward<T> {
    /// Network output before the head (logits when classifying, eV when regressing).
    pub output: Var,
    pub params: Vec<Var>,
    pub moments: Vec<Option<BatchMoments<T>>>,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    config: NetworkConfig,
    params: Vec<Param<T>>,
    stats: Vec<RunningStats<T>>,
    layers: Vec<Layer>,
}

struct Builder<'a, T> {
    rng: ChaCha8Rng,
    params: &'a mut Vec<Param<T>>,
    stats: &'a mut Vec<RunningStats<T>>,
}

impl<T: Scalar> Builder<'_, T> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.gen_range(-bound..bound))).collect();
        self.params.push(Param { name, value: Tensor::new(shape, data).expect("shape") });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, (kh, kw): (usize, usize)) -> ConvRef {
        let fan_in = c_in * kh * kw;
        ConvRef {
            weight: self.uniform(format!("{name}.weight"), &[c_out, c_in, kh, kw], fan_in),
            bias: self.uniform(format!("{name}.bias"), &[c_out], fan_in),
        }
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> ConvRef {
        ConvRef {
            weight: self.uniform(format!("{name}.weight"), &[fout, fin], fin),
            bias: self.uniform(format!("{name}.bias"), &[fout], fin),
        }
    }

    fn bn(&mut self, name: &str, channels: usize) -> BnRef {
        self.params.push(Param { name: format!("{name}.gamma"), value: Tensor::full(&[channels], T::one()) });
        self.params.push(Param { name: format!("{name}.beta"), value: Tensor::zeros(&[channels]) });
        self.stats.push(RunningStats::new(channels));
        BnRef { gamma: self.params.len() - 2, beta: self.params.len() - 1, stats: self.stats.len() - 1 }
    }

    fn block(&mut self, name: &str, spec: BasicPeriodicBlockSpec) -> BlockRef {
        BlockRef {
            spec,
            conv1: self.conv(&format!("{name}.conv1"), spec.in_ch, spec.inside_ch, spec.kernel),
            bn1: self.bn(&format!("{name}.bn1"), spec.inside_ch),
            conv2: self.conv(&format!("{name}.conv2"), spec.inside_ch, spec.out_ch, spec.kernel),
            bn2: self.bn(&format!("{name}.bn2"), spec.out_ch),
        }
    }
}

pub fn build_network(cfg: &NetworkConfig) -> Result<Network<f32>> {
    Network::build(cfg)
}

impl<T: Scalar> Network<T> {
    /// Instantiates the layer stack with seeded fan-in uniform initialisation.
    pub fn build(cfg: &NetworkConfig) -> Result<Network<T>> {
        cfg.validate()?;
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let mut layers = Vec::new();
        let mut b = Builder { rng: ChaCha8Rng::seed_from_u64(cfg.seed), params: &mut params, stats: &mut stats };

        let stem = PeriodicConvSpec {
            in_channels: cfg.input_shape[0],
            out_channels: cfg.stem_channels,
            kernel: cfg.stem_kernel,
            periodicity: cfg.periodicity,
        };
        let conv = b.conv("stem", stem.in_channels, stem.out_channels, stem.kernel);
        layers.push(Layer::PeriodicConv { spec: stem, conv });
        for i in 0..cfg.stem_blocks {
            let spec = BasicPeriodicBlockSpec::uniform(cfg.stem_channels, cfg.block_kernel);
            layers.push(Layer::Block(b.block(&format!("block{i}"), spec)));
        }
        let mut channels = cfg.stem_channels;
        for (i, &stage) in cfg.stages.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            let conv = b.conv(&format!("{name}.down"), channels, stage.out_channels, stage.kernel);
            let bn = b.bn(&format!("{name}.bn"), stage.out_channels);
            layers.push(Layer::Downsample { stage, conv, bn });
            channels = stage.out_channels;
            let spec = BasicPeriodicBlockSpec::uniform(channels, cfg.block_kernel);
            layers.push(Layer::Block(b.block(&format!("{name}.block"), spec)));
        }
        layers.push(Layer::Flatten);
        let mut width = cfg.flat_features()?;
        for (i, &fout) in cfg.fc_widths.iter().enumerate() {
            layers.push(Layer::Dense { conv: b.dense(&format!("fc{i}"), width, fout), relu: true });
            width = fout;
        }
        let last = cfg.fc_widths.len();
        layers.push(Layer::Dense { conv: b.dense(&format!("fc{last}"), width, 1), relu: false });

        Ok(Network { config: cfg.clone(), params, stats, layers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Same network with values converted to another float width.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
                    var: s.var.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
            layers: self.layers.clone(),
        }
    }

    /// Records the whole stack on `g`. Parameters become leaves that require
    /// gradients when `trainable` is set.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, mode: BnMode, trainable: bool) -> Result<Forward<T>> {
        let [c, h, w] = self.config.input_shape;
        let shape = g.shape(input);
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::ShapeMismatch(format!("network expects [N, {c}, {h}, {w}], got {shape:?}")));
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.leaf(p.value.clone(), trainable)).collect();
        let mut moments = vec![None; self.stats.len()];
        let bn_cfg = self.config.batch_norm;

        let mut x = input;
        for layer in &self.layers {
            x = match *layer {
                Layer::PeriodicConv { spec, conv } => {
                    periodic_conv_forward(g, x, &spec, params[conv.weight], Some(params[conv.bias]))?
                }
                Layer::Block(b) => {
                    let weights = BlockWeights {
                        conv1: (params[b.conv1.weight], params[b.conv1.bias]),
                        bn1: (params[b.bn1.gamma], params[b.bn1.beta]),
                        conv2: (params[b.conv2.weight], params[b.conv2.bias]),
                        bn2: (params[b.bn2.gamma], params[b.bn2.beta]),
                    };
                    let stats = [&self.stats[b.bn1.stats], &self.stats[b.bn2.stats]];
                    let (y, [m1, m2]) = basic_periodic_block_forward(
                        g,
                        x,
                        &b.spec,
                        self.config.periodicity,
                        &weights,
                        stats,
                        mode,
                        &bn_cfg,
                    )?;
                    moments[b.bn1.stats] = m1;
                    moments[b.bn2.stats] = m2;
                    y
                }
                Layer::Downsample { stage, conv, bn: r } => {
                    let y = g.conv2d(x, params[conv.weight], Some(params[conv.bias]), stage.stride, stage.padding)?;
                    let (y, m) =
                        g.batch_norm(y, params[r.gamma], params[r.beta], &self.stats[r.stats], mode, &bn_cfg)?;
                    moments[r.stats] = m;
                    g.relu(y)?
                }
                Layer::Flatten => g.flatten(x)?,
                Layer::Dense { conv, relu } => {
                    let y = g.linear(x, params[conv.weight], Some(params[conv.bias]))?;
                    if relu {
                        g.relu(y)?
                    } else {
                        y
                    }
                }
            };
        }
        Ok(Forward { output: x, params, moments })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, moments: &[Option<BatchMoments<T>>]) {
        let momentum = self.config.batch_norm.momentum;
        for (s, m) in self.stats.iter_mut().zip(moments) {
            if let Some(m) = m {
                s.update(m, momentum);
            }
        }
    }

    /// Eval-mode predictions for a `[N, 4, 9, 18]` batch: probabilities when
    /// classifying, band gaps in eV when regressing.
    pub fn predict(&self, batch: Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let x = g.leaf(batch, false);
        let out = self.forward(&mut g, x, BnMode::Eval, false)?.output;
        let out = match self.config.task {
            Task::Classify => g.sigmoid(out)?,
            Task::Regress => out,
        };
        Ok(g.value(out).data().to_vec())
    }
}

/// Graph handles of one basic periodic block: `(weight, bias)` per conv and
/// `(gamma, beta)` per batch norm.
#[derive(Debug, Clone, Copy)]
pub struct BlockWeights {
    pub conv1: (Var, Var),
    pub bn1: (Var, Var),
    pub conv2: (Var, Var),
    pub bn2: (Var, Var),
}

/// `relu(bn2(pconv2(relu(bn1(pconv1(x))))) + x)`.
#[allow(clippy::too_many_arguments)]
pub fn basic_periodic_block_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    spec: &BasicPeriodicBlockSpec,
    periodicity: Periodicity,
    w: &BlockWeights,
    stats: [&RunningStats<T>; 2],
    mode: BnMode,
    bn_cfg: &BatchNormConfig,
) -> Result<(Var, [Option<BatchMoments<T>>; 2])> {
    if spec.in_ch != spec.out_ch {
        return Err(Error::ShapeMismatch(format!(
            "skip connection needs in_ch == out_ch, got {} and {}",
            spec.in_ch, spec.out_ch
        )));
    }
    let [s1, s2] = spec.convs(periodicity);
    let y = periodic_conv_forward(g, x, &s1, w.conv1.0, Some(w.conv1.1))?;
    let (y, m1) = g.batch_norm(y, w.bn1.0, w.bn1.1, stats[0], mode, bn_cfg)?;
    let y = g.relu(y)?;
    let y = periodic_conv_forward(g, y, &s2, w.conv2.0, Some(w.conv2.1))?;
    let (y, m2) = g.batch_norm(y, w.bn2.0, w.bn2.1, stats[1], mode, bn_cfg)?;
    let y = g.add(y, x)?;
    Ok((g.relu(y)?, [m1, m2]))
}

/// Periodic convolution at stride 1: circular width padding (or zero padding
/// when flat) and zero height padding of half the kernel, then a conv2d.
pub fn periodic_conv_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    spec: &PeriodicConvSpec,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    spec.validate().map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let ws = g.shape(weight);
    if ws != [spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1] {
        return Err(Error::ShapeMismatch(format!("periodic conv weight {ws:?} does not match {spec:?}")));
    }
    let (ph, pw) = spec.padding();
    match spec.periodicity {
        Periodicity::Cylindrical => {
            let wrapped = g.circular_pad_width(x, pw)?;
            g.conv2d(wrapped, weight, bias, (1, 1), (ph, 0))
        }
        Periodicity::Flat => g.conv2d(x, weight, bias, (1, 1), (ph, pw)),
    }
}
