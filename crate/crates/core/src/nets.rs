//! Miniature networks with the three block topologies.
//!
//! Layout: stem conv (+BN) -> L blocks -> BN -> ReLU -> global average pool
//! -> fully connected -> softmax cross-entropy. Residual branches are
//! BN -> conv -> BN -> ReLU -> conv -> BN with the perturbation after the last
//! BN. Dense layers are BN -> ReLU -> conv producing `k` channels, perturbed
//! and concatenated. Inputs with 1x1 spatial extent use 1x1 kernels.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnMode, Graph, NodeId};
use crate::controller::{Controller, ControllerConfig};
use crate::error::{invalid, Error, Result};
use crate::perturb::{self, block_stream, Granularity, Mode, PerturbUnit, Regularizer, Scales};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Topology {
    #[default]
    Res2,
    Res3,
    Dense,
}

/// Channel growth rule across blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Widening {
    Constant,
    /// Block `l` has `width + floor(alpha * l / L)` channels.
    Pyramid(usize),
    /// Dense layers each add this many channels.
    Growth(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RegMode {
    /// Plain blocks with a literal branch scale.
    None,
    /// Dynamic perturbation `A + s*r`; `s` comes from the schedule.
    #[default]
    Perturb,
    ShakeShake,
    ShakeDrop,
}

/// Per-block noise half-range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseRange {
    /// `R_l = l / L`.
    Linear,
    Uniform(f64),
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($name => Ok($ty::$variant),)*
                    other => Err(invalid!(concat!("unknown ", stringify!($ty), " `{}`"), other)),
                }
            }
        }
        impl $ty {
            pub fn name(&self) -> &'static str {
                match self { $($ty::$variant => $name,)* }
            }
        }
    };
}

text_enum!(Topology { Res2 => "res2", Res3 => "res3", Dense => "dense" });
text_enum!(RegMode { None => "none", Perturb => "perturb", ShakeShake => "shake_shake", ShakeDrop => "shakedrop" });

impl FromStr for Granularity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "per_batch" | "batch" => Ok(Granularity::PerBatch),
            "per_sample" | "sample" => Ok(Granularity::PerSample),
            other => Err(invalid!("unknown granularity `{other}`")),
        }
    }
}

impl FromStr for NoiseRange {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().split_once(':') {
            None if s.trim() == "linear" => Ok(NoiseRange::Linear),
            Some(("uniform", v)) => {
                let r: f64 = v.parse().map_err(|_| invalid!("bad noise range `{v}`"))?;
                Ok(NoiseRange::Uniform(r))
            }
            _ => Err(invalid!("unknown noise range `{s}` (expected linear or uniform:R)")),
        }
    }
}

impl FromStr for Widening {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let count = |v: &str| v.parse::<usize>().map_err(|_| invalid!("bad widening amount `{v}`"));
        match s.split_once(':') {
            None if s == "constant" => Ok(Widening::Constant),
            Some(("pyramid", v)) => Ok(Widening::Pyramid(count(v)?)),
            Some(("growth", v)) => Ok(Widening::Growth(count(v)?)),
            _ => Err(invalid!("unknown widening `{s}` (expected constant, pyramid:a or growth:k)")),
        }
    }
}

impl fmt::Display for Widening {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Widening::Constant => f.write_str("constant"),
            Widening::Pyramid(a) => write!(f, "pyramid:{a}"),
            Widening::Growth(k) => write!(f, "growth:{k}"),
        }
    }
}

impl fmt::Display for NoiseRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseRange::Linear => f.write_str("linear"),
            NoiseRange::Uniform(r) => write!(f, "uniform:{r}"),
        }
    }
}

/// Declarative description of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub topology: Topology,
    /// Number of blocks `L` (dense layers for the dense topology).
    pub depth: usize,
    /// Stem output channels.
    pub width: usize,
    pub widening: Widening,
    /// Number of resolution stages; each stage after the first starts with stride 2.
    pub stages: usize,
    pub num_classes: usize,
    /// `[channels, height, width]` of one example.
    pub input_shape: [usize; 3],
    pub reg_mode: RegMode,
    pub granularity: Granularity,
    /// Basic amplitude `A`.
    pub amplitude: f64,
    pub noise_range: NoiseRange,
    pub clamp_theta: bool,
    /// ShakeDrop keep probability of the last block.
    pub shakedrop_terminal: f64,
    /// Literal branch scale for [`RegMode::None`].
    pub branch_scale: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            topology: Topology::Res2,
            depth: 4,
            width: 16,
            widening: Widening::Constant,
            stages: 1,
            num_classes: 2,
            input_shape: [2, 1, 1],
            reg_mode: RegMode::Perturb,
            granularity: Granularity::PerBatch,
            amplitude: 0.5,
            noise_range: NoiseRange::Linear,
            clamp_theta: false,
            shakedrop_terminal: 0.5,
            branch_scale: 1.0,
            bn_momentum: 0.9,
            seed: 0,
        }
    }
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invalid(msg));
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.width == 0 {
            return fail("width must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if self.input_shape.contains(&0) {
            return fail(alloc::format!("input shape {:?} has a zero extent", self.input_shape));
        }
        if self.stages == 0 || self.stages > self.depth {
            return fail(alloc::format!("stages must be in 1..={}, got {}", self.depth, self.stages));
        }
        match (self.topology, self.widening) {
            (Topology::Dense, Widening::Growth(k)) if k > 0 => {}
            (Topology::Dense, _) => return fail("dense topology requires widening growth:k with k >= 1".into()),
            (_, Widening::Growth(_)) => return fail("growth widening applies only to the dense topology".into()),
            _ => {}
        }
        match (self.reg_mode, self.topology) {
            (RegMode::ShakeShake, t) if t != Topology::Res3 => {
                return fail("shake_shake requires the res3 topology (two branches)".into())
            }
            (RegMode::ShakeDrop, Topology::Res3) => return fail("shakedrop applies to res2 or dense topologies".into()),
            _ => {}
        }
        if !self.amplitude.is_finite() || !self.branch_scale.is_finite() {
            return fail("amplitude and branch_scale must be finite".into());
        }
        if let NoiseRange::Uniform(r) = self.noise_range {
            if !(0.0..=1.0).contains(&r) {
                return fail(alloc::format!("uniform noise range {r} outside [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.shakedrop_terminal) {
            return fail(alloc::format!("shakedrop_terminal {} outside [0, 1]", self.shakedrop_terminal));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return fail(alloc::format!("bn_momentum {} outside [0, 1)", self.bn_momentum));
        }
        Ok(())
    }

    fn kernel(&self) -> usize {
        if self.input_shape[1] == 1 && self.input_shape[2] == 1 {
            1
        } else {
            3
        }
    }

    /// Block index (1-based) that opens each later stage.
    fn stage_starts(&self) -> Vec<usize> {
        (1..self.stages).map(|k| k * self.depth / self.stages + 1).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    stride: usize,
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct Branch {
    bn_in: Bn,
    conv1: Conv,
    bn1: Bn,
    conv2: Conv,
    bn2: Bn,
}

#[derive(Debug, Clone, Copy)]
enum Shortcut {
    Identity,
    Pad(usize),
    Project(Conv, Bn),
}

#[derive(Debug, Clone)]
enum Stage {
    Res2 { branch: Branch, shortcut: Shortcut, reg: usize },
    Res3 { branches: [Branch; 2], shortcut: Shortcut, reg: usize },
    DenseLayer { bn: Bn, conv: Conv, reg: usize },
    Transition { bn: Bn, conv: Conv },
}

#[derive(Debug, Clone)]
struct RunningStats {
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Trace of one perturbed block in a forward pass.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    /// 1-based block index.
    pub block: usize,
    pub input: NodeId,
    /// Unscaled branch outputs (residual branches, or the new dense features).
    pub branches: Vec<NodeId>,
    pub output: NodeId,
    pub scales: Scales,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: NodeId,
    pub loss: Option<NodeId>,
    /// Graph leaf for each parameter, in parameter order.
    pub params: Vec<NodeId>,
    pub blocks: Vec<BlockTrace>,
}

#[derive(Debug, Clone)]
pub struct Net {
    spec: NetSpec,
    params: Vec<Tensor>,
    names: Vec<String>,
    stats: Vec<RunningStats>,
    stem: (Conv, Option<Bn>),
    stages: Vec<Stage>,
    head_bn: Bn,
    fc_w: usize,
    fc_b: usize,
    regs: Vec<Regularizer>,
    mode: Mode,
    bn_running_in_train: bool,
}

/// Builds a network and, for the dynamic perturbation, its strength controller.
pub fn build_net(spec: &NetSpec, controller: ControllerConfig) -> Result<(Net, Option<Controller>)> {
    let net = Net::new(spec.clone())?;
    let ctrl = match spec.reg_mode {
        RegMode::Perturb => Some(Controller::new(controller)?),
        _ => None,
    };
    Ok((net, ctrl))
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Tensor>,
    names: Vec<String>,
    stats: Vec<RunningStats>,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    /// He-uniform initialization.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let bound = libm::sqrt(6.0 / (cin * k * k) as f64);
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| bound * (2.0 * rng.gen::<f64>() - 1.0));
        Conv { weight: self.push(alloc::format!("{name}.weight"), w), stride }
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        let gamma = self.push(alloc::format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        let beta = self.push(alloc::format!("{name}.beta"), Tensor::zeros(&[c]));
        self.stats.push(RunningStats { mean: vec![0.0; c], var: vec![1.0; c] });
        Bn { gamma, beta, stats: self.stats.len() - 1 }
    }

    fn branch(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Branch {
        Branch {
            bn_in: self.bn(&alloc::format!("{name}.bn0"), cin),
            conv1: self.conv(&alloc::format!("{name}.conv1"), cin, cout, k, stride),
            bn1: self.bn(&alloc::format!("{name}.bn1"), cout),
            conv2: self.conv(&alloc::format!("{name}.conv2"), cout, cout, k, 1),
            bn2: self.bn(&alloc::format!("{name}.bn2"), cout),
        }
    }

    fn shortcut(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Shortcut> {
        if stride == 2 {
            let conv = self.conv(&alloc::format!("{name}.proj"), cin, cout, 1, 2);
            let bn = self.bn(&alloc::format!("{name}.proj_bn"), cout);
            Ok(Shortcut::Project(conv, bn))
        } else if cout > cin {
            Ok(Shortcut::Pad(cout - cin))
        } else if cout == cin {
            Ok(Shortcut::Identity)
        } else {
            Err(invalid!("{name}: channels shrink from {cin} to {cout}"))
        }
    }
}

impl Net {
    pub fn new(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel();
        let total = spec.depth;
        let mut b = Builder { rng: block_stream(spec.seed, 0), params: Vec::new(), names: Vec::new(), stats: Vec::new() };
        let stem_conv = b.conv("stem", spec.input_shape[0], spec.width, k, 1);
        let stem_bn = (spec.topology != Topology::Dense).then(|| b.bn("stem.bn", spec.width));
        let starts = spec.stage_starts();
        let mut stages = Vec::new();
        let mut regs = Vec::new();
        let mut channels = spec.width;
        for l in 1..=total {
            let stride = if starts.contains(&l) { 2 } else { 1 };
            let name = alloc::format!("block{l}");
            let reg = regs.len();
            match spec.topology {
                Topology::Res2 | Topology::Res3 => {
                    let out = match spec.widening {
                        Widening::Pyramid(alpha) => spec.width + alpha * l / total,
                        _ => spec.width,
                    };
                    let shortcut = b.shortcut(&name, channels, out, stride)?;
                    if spec.topology == Topology::Res2 {
                        let branch = b.branch(&alloc::format!("{name}.branch"), channels, out, k, stride);
                        stages.push(Stage::Res2 { branch, shortcut, reg });
                    } else {
                        let b1 = b.branch(&alloc::format!("{name}.branch1"), channels, out, k, stride);
                        let b2 = b.branch(&alloc::format!("{name}.branch2"), channels, out, k, stride);
                        stages.push(Stage::Res3 { branches: [b1, b2], shortcut, reg });
                    }
                    channels = out;
                }
                Topology::Dense => {
                    let Widening::Growth(growth) = spec.widening else { unreachable!("validated") };
                    if stride == 2 {
                        let tname = alloc::format!("transition{l}");
                        let bn = b.bn(&alloc::format!("{tname}.bn"), channels);
                        let conv = b.conv(&alloc::format!("{tname}.conv"), channels, channels, 1, 2);
                        stages.push(Stage::Transition { bn, conv });
                    }
                    let bn = b.bn(&alloc::format!("{name}.bn"), channels);
                    let conv = b.conv(&alloc::format!("{name}.conv"), channels, growth, k, 1);
                    stages.push(Stage::DenseLayer { bn, conv, reg });
                    channels += growth;
                }
            }
            regs.push(Self::regularizer(&spec, l)?);
        }
        let head_bn = b.bn("head.bn", channels);
        let fan = libm::sqrt(1.0 / channels as f64);
        let rng = &mut b.rng;
        let w = Tensor::from_fn(&[channels, spec.num_classes], |_| fan * (2.0 * rng.gen::<f64>() - 1.0));
        let fc_w = b.push("fc.weight".to_string(), w);
        let fc_b = b.push("fc.bias".to_string(), Tensor::zeros(&[spec.num_classes]));
        Ok(Self {
            spec,
            params: b.params,
            names: b.names,
            stats: b.stats,
            stem: (stem_conv, stem_bn),
            stages,
            head_bn,
            fc_w,
            fc_b,
            regs,
            mode: Mode::Train,
            bn_running_in_train: false,
        })
    }

    fn regularizer(spec: &NetSpec, l: usize) -> Result<Regularizer> {
        let total = spec.depth;
        Ok(match spec.reg_mode {
            RegMode::None => Regularizer::Constant(spec.branch_scale),
            RegMode::Perturb => {
                let range = match spec.noise_range {
                    NoiseRange::Linear => perturb::noise_range(l, total)?,
                    NoiseRange::Uniform(r) => r,
                };
                let unit = PerturbUnit::new(spec.amplitude, range, l, spec.granularity, spec.seed)?
                    .with_clamp(spec.clamp_theta);
                Regularizer::Dynamic(unit)
            }
            RegMode::ShakeShake => Regularizer::ShakeShake { granularity: spec.granularity, rng: block_stream(spec.seed, l) },
            RegMode::ShakeDrop => Regularizer::ShakeDrop {
                block: l,
                total,
                terminal: spec.shakedrop_terminal,
                granularity: spec.granularity,
                rng: block_stream(spec.seed, l),
            },
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Eval freezes batchnorm to running statistics and folds every
    /// perturbation to its expectation; train restores sampling.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        for reg in &mut self.regs {
            if let Regularizer::Dynamic(unit) = reg {
                unit.set_mode(mode);
            }
        }
    }

    /// Use running statistics in train mode too.
    pub fn set_bn_running_in_train(&mut self, on: bool) {
        self.bn_running_in_train = on;
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn perturb_units(&self) -> impl Iterator<Item = &PerturbUnit> {
        self.regs.iter().filter_map(|r| match r {
            Regularizer::Dynamic(u) => Some(u),
            _ => None,
        })
    }

    /// Copies parameters and running statistics from a net of identical layout.
    pub fn copy_state_from(&mut self, other: &Net) -> Result<()> {
        let same = self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.shape() == b.shape())
            && self.stats.len() == other.stats.len();
        if !same {
            return Err(invalid!("cannot copy state between nets of different layouts"));
        }
        self.params.clone_from(&other.params);
        self.stats.clone_from(&other.stats);
        Ok(())
    }

    /// Builds the forward pass for `input` (`[n, c, h, w]`) onto `g`.
    ///
    /// In train mode each block draws fresh scales with strength `s` and
    /// batch-statistics batchnorm layers update their running averages.
    pub fn forward(&mut self, g: &mut Graph, input: &Tensor, labels: Option<&[usize]>, s: f64) -> Result<ForwardOutput> {
        let [c, h, w] = self.spec.input_shape;
        if input.shape().len() != 4 || input.shape()[1..] != [c, h, w] {
            return Err(Error::Shape { op: "net input", shapes: vec![input.shape().to_vec(), vec![0, c, h, w]] });
        }
        let batch = input.shape()[0];
        let params: Vec<NodeId> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let mut pass = Pass {
            g,
            params: &params,
            stats: &self.stats,
            use_running: self.mode == Mode::Eval || self.bn_running_in_train,
            batch_updates: Vec::new(),
        };
        let x = pass.g.input(input.clone());
        let (stem_conv, stem_bn) = self.stem;
        let mut x = pass.conv(x, stem_conv)?;
        if let Some(bn) = stem_bn {
            x = pass.bn(x, bn)?;
        }
        let mut blocks = Vec::new();
        for stage in &self.stages {
            match stage {
                Stage::Res2 { branch, shortcut, reg } => {
                    let f = pass.branch(x, branch)?;
                    let sc = pass.shortcut(x, *shortcut)?;
                    let scales = self.regs[*reg].scales(self.mode, s, batch)?;
                    let out = match self.regs[*reg] {
                        Regularizer::Constant(v) => {
                            let scaled = if v == 1.0 { f } else { pass.g.scalar_mul(f, v)? };
                            pass.g.add(sc, scaled)?
                        }
                        _ => perturb::res2_forward(pass.g, sc, f, &scales.forward, &scales.backward)?,
                    };
                    blocks.push(BlockTrace { block: reg + 1, input: x, branches: vec![f], output: out, scales });
                    x = out;
                }
                Stage::Res3 { branches, shortcut, reg } => {
                    let f1 = pass.branch(x, &branches[0])?;
                    let f2 = pass.branch(x, &branches[1])?;
                    let sc = pass.shortcut(x, *shortcut)?;
                    let scales = self.regs[*reg].scales(self.mode, s, batch)?;
                    let out = match self.regs[*reg] {
                        Regularizer::Constant(v) => {
                            let sum = pass.g.add(f1, f2)?;
                            let scaled = if v == 1.0 { sum } else { pass.g.scalar_mul(sum, v)? };
                            pass.g.add(sc, scaled)?
                        }
                        _ => perturb::res3_forward(pass.g, sc, f1, f2, &scales.forward, &scales.backward)?,
                    };
                    blocks.push(BlockTrace { block: reg + 1, input: x, branches: vec![f1, f2], output: out, scales });
                    x = out;
                }
                Stage::DenseLayer { bn, conv, reg } => {
                    let y = pass.bn(x, *bn)?;
                    let y = pass.g.relu(y)?;
                    let y = pass.conv(y, *conv)?;
                    let scales = self.regs[*reg].scales(self.mode, s, batch)?;
                    let out = match self.regs[*reg] {
                        Regularizer::Constant(v) => {
                            let scaled = if v == 1.0 { y } else { pass.g.scalar_mul(y, v)? };
                            pass.g.concat(&[x, scaled])?
                        }
                        _ => perturb::dense_forward(pass.g, x, y, &scales.forward, &scales.backward)?,
                    };
                    blocks.push(BlockTrace { block: reg + 1, input: x, branches: vec![y], output: out, scales });
                    x = out;
                }
                Stage::Transition { bn, conv } => {
                    let y = pass.bn(x, *bn)?;
                    let y = pass.g.relu(y)?;
                    x = pass.conv(y, *conv)?;
                }
            }
        }
        let y = pass.bn(x, self.head_bn)?;
        let y = pass.g.relu(y)?;
        let y = pass.g.global_avg_pool(y)?;
        let y = pass.g.matmul(y, params[self.fc_w])?;
        let logits = pass.g.bias_add(y, params[self.fc_b])?;
        let loss = labels.map(|l| pass.g.softmax_cross_entropy(logits, l)).transpose()?;

        let updates = core::mem::take(&mut pass.batch_updates);
        if self.mode == Mode::Train {
            let m = self.spec.bn_momentum;
            for (stats, node) in updates {
                let (mean, var) = g.batch_stats(node).expect("batch-mode batchnorm node");
                let rs = &mut self.stats[stats];
                for (r, &b) in rs.mean.iter_mut().zip(mean) {
                    *r = m * *r + (1.0 - m) * b;
                }
                for (r, &b) in rs.var.iter_mut().zip(var) {
                    *r = m * *r + (1.0 - m) * b;
                }
            }
        }
        Ok(ForwardOutput { logits, loss, params, blocks })
    }
}

/// State threaded through one forward pass.
struct Pass<'a> {
    g: &'a mut Graph,
    params: &'a [NodeId],
    stats: &'a [RunningStats],
    use_running: bool,
    batch_updates: Vec<(usize, NodeId)>,
}

impl Pass<'_> {
    fn conv(&mut self, x: NodeId, conv: Conv) -> Result<NodeId> {
        self.g.conv2d(x, self.params[conv.weight], conv.stride)
    }

    fn bn(&mut self, x: NodeId, bn: Bn) -> Result<NodeId> {
        let mode = if self.use_running {
            let rs = &self.stats[bn.stats];
            BnMode::Running { mean: rs.mean.clone(), var: rs.var.clone(), eps: BN_EPS }
        } else {
            BnMode::Batch { eps: BN_EPS }
        };
        let batch = matches!(mode, BnMode::Batch { .. });
        let y = self.g.batchnorm(x, self.params[bn.gamma], self.params[bn.beta], mode)?;
        if batch {
            self.batch_updates.push((bn.stats, y));
        }
        Ok(y)
    }

    fn branch(&mut self, x: NodeId, b: &Branch) -> Result<NodeId> {
        let y = self.bn(x, b.bn_in)?;
        let y = self.conv(y, b.conv1)?;
        let y = self.bn(y, b.bn1)?;
        let y = self.g.relu(y)?;
        let y = self.conv(y, b.conv2)?;
        self.bn(y, b.bn2)
    }

    fn shortcut(&mut self, x: NodeId, sc: Shortcut) -> Result<NodeId> {
        match sc {
            Shortcut::Identity => Ok(x),
            Shortcut::Pad(extra) => self.g.pad_channels(x, extra),
            Shortcut::Project(conv, bn) => {
                let y = self.conv(x, conv)?;
                self.bn(y, bn)
            }
        }
    }
}
