//! Flat `key = value` run configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dynreg_core::controller::{ControllerConfig, ScheduleSpec};
use dynreg_core::nets::{NetSpec, RegMode};

use crate::data::SyntheticKind;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synthetic {
        kind: SyntheticKind,
        n_per_class: usize,
        test_per_class: usize,
        classes: usize,
        noise: f64,
        data_seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only the first `limit` training examples (0 keeps all).
        limit: usize,
    },
}

/// Everything a training run needs. The network's input shape, class count
/// and seed are filled in from the dataset and `seed` at run time.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub net: NetSpec,
    pub dataset: DatasetSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub delta_s: f64,
    pub filter_length: usize,
    pub sigma: f64,
    pub s0: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub schedule: ScheduleSpec,
    pub hflip: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ctrl = ControllerConfig::default();
        Self {
            net: NetSpec::default(),
            dataset: DatasetSpec::Synthetic {
                kind: SyntheticKind::Spirals,
                n_per_class: 200,
                test_per_class: 200,
                classes: 2,
                noise: 0.1,
                data_seed: 0,
            },
            epochs: 10,
            batch_size: 32,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            delta_s: ctrl.delta_s,
            filter_length: ctrl.filter_length,
            sigma: ctrl.sigma,
            s0: ctrl.s0,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            schedule: ScheduleSpec::Dynamic,
            hflip: false,
        }
    }
}

const SYNTHETIC_KEYS: [&str; 5] = ["n_per_class", "test_per_class", "classes", "noise", "data_seed"];
const IDX_KEYS: [&str; 5] = ["train_images", "train_labels", "test_images", "test_labels", "limit"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| LabError::Config(format!("{key} = {value}: {e}")))
}

fn core<T>(key: &str, r: dynreg_core::Result<T>) -> Result<T> {
    r.map_err(|e| LabError::Config(format!("{key}: {e}")))
}

impl RunConfig {
    pub fn controller(&self) -> ControllerConfig {
        ControllerConfig { s0: self.s0, delta_s: self.delta_s, filter_length: self.filter_length, sigma: self.sigma }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        text.parse()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let net = &mut self.net;
        match key {
            "topology" => net.topology = core(key, value.parse())?,
            "depth" => net.depth = parse(key, value)?,
            "width" => net.width = parse(key, value)?,
            "widening" => net.widening = core(key, value.parse())?,
            "stages" => net.stages = parse(key, value)?,
            "reg_mode" => net.reg_mode = core(key, value.parse())?,
            "granularity" => net.granularity = core(key, value.parse())?,
            "amplitude" => net.amplitude = parse(key, value)?,
            "noise_range" => net.noise_range = core(key, value.parse())?,
            "clamp_theta" => net.clamp_theta = parse(key, value)?,
            "shakedrop_terminal" => net.shakedrop_terminal = parse(key, value)?,
            "branch_scale" => net.branch_scale = parse(key, value)?,
            "bn_momentum" => net.bn_momentum = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr0" => self.lr0 = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "delta_s" => self.delta_s = parse(key, value)?,
            "filter_length" => self.filter_length = parse(key, value)?,
            "sigma" => self.sigma = parse(key, value)?,
            "s0" => self.s0 = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "schedule" => self.schedule = core(key, value.parse())?,
            "hflip" => self.hflip = parse(key, value)?,
            "dataset" => {
                self.dataset = match value {
                    "idx" => DatasetSpec::Idx {
                        train_images: PathBuf::new(),
                        train_labels: PathBuf::new(),
                        test_images: PathBuf::new(),
                        test_labels: PathBuf::new(),
                        limit: 0,
                    },
                    other => {
                        let kind = parse(key, other)?;
                        match &self.dataset {
                            DatasetSpec::Synthetic { n_per_class, test_per_class, classes, noise, data_seed, .. } => {
                                DatasetSpec::Synthetic {
                                    kind,
                                    n_per_class: *n_per_class,
                                    test_per_class: *test_per_class,
                                    classes: *classes,
                                    noise: *noise,
                                    data_seed: *data_seed,
                                }
                            }
                            DatasetSpec::Idx { .. } => DatasetSpec::Synthetic {
                                kind,
                                n_per_class: 200,
                                test_per_class: 200,
                                classes: 2,
                                noise: 0.1,
                                data_seed: 0,
                            },
                        }
                    }
                }
            }
            _ if SYNTHETIC_KEYS.contains(&key) => {
                let DatasetSpec::Synthetic { n_per_class, test_per_class, classes, noise, data_seed, .. } = &mut self.dataset
                else {
                    return Err(LabError::Config(format!("{key} applies only to synthetic datasets")));
                };
                match key {
                    "n_per_class" => *n_per_class = parse(key, value)?,
                    "test_per_class" => *test_per_class = parse(key, value)?,
                    "classes" => *classes = parse(key, value)?,
                    "noise" => *noise = parse(key, value)?,
                    _ => *data_seed = parse(key, value)?,
                }
            }
            _ if IDX_KEYS.contains(&key) => {
                let DatasetSpec::Idx { train_images, train_labels, test_images, test_labels, limit } = &mut self.dataset
                else {
                    return Err(LabError::Config(format!("{key} applies only to dataset = idx")));
                };
                match key {
                    "train_images" => *train_images = value.into(),
                    "train_labels" => *train_labels = value.into(),
                    "test_images" => *test_images = value.into(),
                    "test_labels" => *test_labels = value.into(),
                    _ => *limit = parse(key, value)?,
                }
            }
            _ => return Err(LabError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(LabError::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be at least 1".into());
        }
        for (name, v) in [("lr0", self.lr0), ("delta_s", self.delta_s), ("sigma", self.sigma)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.s0 >= 0.0 && self.s0.is_finite()) {
            return fail(format!("s0 must be >= 0, got {}", self.s0));
        }
        if self.filter_length == 0 || self.filter_length.is_multiple_of(2) {
            return fail(format!("filter_length must be odd, got {}", self.filter_length));
        }
        if self.net.reg_mode != RegMode::Perturb && self.schedule != ScheduleSpec::None {
            return fail(format!(
                "schedule {} needs reg_mode = perturb (reg_mode is {})",
                self.schedule,
                self.net.reg_mode.name()
            ));
        }
        match &self.dataset {
            DatasetSpec::Synthetic { n_per_class, test_per_class, classes, noise, .. } => {
                if *n_per_class == 0 || *test_per_class == 0 || *classes < 2 || !(*noise >= 0.0) {
                    return fail("synthetic dataset needs n_per_class, test_per_class >= 1, classes >= 2, noise >= 0".into());
                }
            }
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels, .. } => {
                for (k, p) in [("train_images", train_images), ("train_labels", train_labels), ("test_images", test_images), ("test_labels", test_labels)] {
                    if p.as_os_str().is_empty() {
                        return fail(format!("dataset = idx requires {k}"));
                    }
                }
            }
        }
        // the dataset fixes these two; check everything else now
        let probe = NetSpec { input_shape: [1, 1, 1], num_classes: 2, ..self.net.clone() };
        probe.validate().map_err(|e| LabError::Config(e.to_string()))?;
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let n = &self.net;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("topology", n.topology.name().into());
        kv("depth", n.depth.to_string());
        kv("width", n.width.to_string());
        kv("widening", n.widening.to_string());
        kv("stages", n.stages.to_string());
        kv("reg_mode", n.reg_mode.name().into());
        kv("granularity", n.granularity.name().into());
        kv("amplitude", n.amplitude.to_string());
        kv("noise_range", n.noise_range.to_string());
        kv("clamp_theta", n.clamp_theta.to_string());
        kv("shakedrop_terminal", n.shakedrop_terminal.to_string());
        kv("branch_scale", n.branch_scale.to_string());
        kv("bn_momentum", n.bn_momentum.to_string());
        match &self.dataset {
            DatasetSpec::Synthetic { kind, n_per_class, test_per_class, classes, noise, data_seed } => {
                let name = match kind {
                    SyntheticKind::Gaussians => "gaussians",
                    SyntheticKind::Spirals => "spirals",
                };
                kv("dataset", name.into());
                kv("n_per_class", n_per_class.to_string());
                kv("test_per_class", test_per_class.to_string());
                kv("classes", classes.to_string());
                kv("noise", noise.to_string());
                kv("data_seed", data_seed.to_string());
            }
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels, limit } => {
                kv("dataset", "idx".into());
                kv("train_images", train_images.display().to_string());
                kv("train_labels", train_labels.display().to_string());
                kv("test_images", test_images.display().to_string());
                kv("test_labels", test_labels.display().to_string());
                kv("limit", limit.to_string());
            }
        }
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr0", self.lr0.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("delta_s", self.delta_s.to_string());
        kv("filter_length", self.filter_length.to_string());
        kv("sigma", self.sigma.to_string());
        kv("s0", self.s0.to_string());
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("schedule", self.schedule.to_string());
        kv("hflip", self.hflip.to_string());
        out
    }
}

impl FromStr for RunConfig {
    type Err = LabError;

    /// Blank lines and `#` comments are skipped; a key may appear once.
    /// `dataset` is applied first so dataset-specific keys can follow it in any order.
    fn from_str(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen = BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("line {}: expected key = value, got `{line}`", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(LabError::Config(format!("line {}: duplicate key `{k}`", no + 1)));
            }
            pairs.push((no + 1, k, v));
        }
        pairs.sort_by_key(|&(_, k, _)| k != "dataset");
        let mut cfg = RunConfig::default();
        for (no, k, v) in pairs {
            cfg.set(k, v).map_err(|e| match e {
                LabError::Config(msg) => LabError::Config(format!("line {no}: {msg}")),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
