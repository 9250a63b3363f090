//! Training loop, evaluation, experiment runner and schedule sweeps.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dynreg_core::autodiff::Graph;
use dynreg_core::controller::{Controller, ScheduleSpec};
use dynreg_core::nets::{build_net, Net};
use dynreg_core::optim::{cosine_lr, sgd_step};
use dynreg_core::perturb::Mode;
use dynreg_core::{Error as CoreError, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetSpec, RunConfig};
use crate::data::{self, BatchIterator, Dataset, Normalizer, Split};
use crate::error::{DataError, LabError, Result};

pub const METRICS_HEADER: &str = "iter,epoch,raw_loss,filtered_loss,grad_diff,s,lr,train_err,test_err";

/// What one optimization step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub raw_loss: f64,
    pub filtered_loss: f64,
    pub grad_diff: Option<f64>,
    /// Strength the step sampled its perturbations with.
    pub s_used: f64,
    /// Strength the next step will use.
    pub s_next: f64,
    pub lr: f64,
    pub errors: usize,
    pub batch: usize,
}

/// One CSV row; `s` is the strength for the following iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub epoch: usize,
    pub raw_loss: f64,
    pub filtered_loss: f64,
    pub grad_diff: Option<f64>,
    pub s: f64,
    pub lr: f64,
    pub train_err: f64,
    pub test_err: Option<f64>,
}

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        write!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.epoch,
            self.raw_loss,
            self.filtered_loss,
            opt(self.grad_diff),
            self.s,
            self.lr,
            self.train_err,
            opt(self.test_err)
        )
    }
}

/// A net, its optimizer state, and the strength controller.
#[derive(Debug, Clone)]
pub struct Trainer {
    net: Net,
    controller: Controller,
    schedule: ScheduleSpec,
    velocity: Vec<Tensor>,
    iteration: u64,
    total: u64,
    lr0: f64,
    momentum: f64,
    weight_decay: f64,
}

impl Trainer {
    /// `total` is the number of steps the cosine and linear schedules span.
    pub fn new(cfg: &RunConfig, input_shape: [usize; 3], num_classes: usize, total: u64) -> Result<Self> {
        let spec = dynreg_core::nets::NetSpec { input_shape, num_classes, seed: cfg.seed, ..cfg.net.clone() };
        let (net, ctrl) = build_net(&spec, cfg.controller())?;
        // every run logs the filtered loss, so non-dynamic modes get a controller too
        let controller = match ctrl {
            Some(c) => c,
            None => Controller::new(cfg.controller())?,
        };
        let velocity = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Self {
            net,
            controller,
            schedule: cfg.schedule,
            velocity,
            iteration: 0,
            total,
            lr0: cfg.lr0,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        })
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Net {
        &mut self.net
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Strength the next step will sample with.
    pub fn current_s(&self) -> Result<f64> {
        Ok(self.schedule.value(self.controller.s(), self.iteration, self.total)?)
    }

    /// Samples with the current strength, steps the optimizer, then feeds the
    /// bare cross-entropy to the controller.
    pub fn train_step(&mut self, x: &Tensor, y: &[usize]) -> Result<StepRecord> {
        if self.net.mode() == Mode::Eval {
            return Err(CoreError::EvalMode("train_step").into());
        }
        if self.iteration >= self.total {
            return Err(LabError::Config(format!("step {} beyond the planned {}", self.iteration + 1, self.total)));
        }
        let s = self.current_s()?;
        let lr = cosine_lr(self.lr0, self.iteration, self.total)?;
        let mut g = Graph::new();
        let out = self.net.forward(&mut g, x, Some(y), s)?;
        let loss = out.loss.expect("labels given");
        let raw_loss = g.value(loss).item();
        if !raw_loss.is_finite() {
            return Err(LabError::NonFinite { iteration: self.iteration + 1, value: raw_loss });
        }
        let errors = count_errors(g.value(out.logits), y);
        let grads = g.backward(loss)?;
        for (i, &id) in out.params.iter().enumerate() {
            let grad = grads.get(id).expect("param gradient");
            sgd_step(&mut self.net.params_mut()[i], grad, &mut self.velocity[i], lr, self.momentum, self.weight_decay)?;
        }
        let outcome = self.controller.step(raw_loss)?;
        self.iteration += 1;
        Ok(StepRecord {
            raw_loss,
            filtered_loss: outcome.filtered,
            grad_diff: outcome.diff,
            s_used: s,
            s_next: self.current_s()?,
            lr,
            errors,
            batch: y.len(),
        })
    }
}

fn count_errors(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            // first maximum wins ties
            let pred = row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            pred != y
        })
        .count()
}

/// Top-1 error in percent, computed in eval mode; the net's mode is restored.
pub fn evaluate(net: &mut Net, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(DataError::Invalid("cannot evaluate on an empty dataset".into()).into());
    }
    let mode = net.mode();
    net.set_mode(Mode::Eval);
    let mut wrong = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let result = idx.chunks(256).try_for_each(|chunk| {
        let (x, y) = ds.batch(chunk);
        let mut g = Graph::new();
        let out = net.forward(&mut g, &x, None, 0.0)?;
        wrong += count_errors(g.value(out.logits), &y);
        Ok::<_, LabError>(())
    });
    net.set_mode(mode);
    result?;
    Ok(100.0 * wrong as f64 / ds.len() as f64)
}

/// Train and test splits for a config; image data is normalized with train statistics.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSpec::Synthetic { kind, n_per_class, test_per_class, classes, noise, data_seed } => {
            let train = data::gen_synthetic_split(*kind, *n_per_class, *classes, *noise, *data_seed, Split::Train)?;
            let test = data::gen_synthetic_split(*kind, *test_per_class, *classes, *noise, *data_seed, Split::Test)?;
            Ok((train, test))
        }
        DatasetSpec::Idx { train_images, train_labels, test_images, test_labels, limit } => {
            let mut train = data::load_idx(train_images, train_labels, Split::Train)?;
            let mut test = data::load_idx(test_images, test_labels, Split::Test)?;
            if *limit > 0 && *limit < train.len() {
                let keep: Vec<usize> = (0..*limit).collect();
                let (x, y) = train.batch(&keep);
                train = Dataset::new(x.into_data(), y, train.shape(), train.num_classes(), Split::Train)?;
            }
            let classes = train.num_classes().max(test.num_classes());
            train.set_num_classes(classes)?;
            test.set_num_classes(classes)?;
            let norm = Normalizer::fit(&train);
            norm.apply(&mut train);
            norm.apply(&mut test);
            Ok((train, test))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub schedule: ScheduleSpec,
    pub seed: u64,
    pub param_count: usize,
    pub iterations: u64,
    pub final_s: f64,
    pub final_train_err: f64,
    pub final_test_err: f64,
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "schedule = {}", self.schedule)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "param_count = {}", self.param_count)?;
        writeln!(f, "iterations = {}", self.iterations)?;
        writeln!(f, "final_s = {}", self.final_s)?;
        writeln!(f, "final_train_err = {}", self.final_train_err)?;
        writeln!(f, "final_test_err = {}", self.final_test_err)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub rows: Vec<MetricsRow>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| LabError::io(path, e))
}

/// Trains on the given splits; with `out_dir`, writes `metrics.csv`,
/// `summary.txt` and the canonical `config.txt` there.
pub fn run_on(cfg: &RunConfig, train: &Dataset, test: &Dataset, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let mut batches = BatchIterator::new(train.len(), cfg.batch_size, cfg.seed)?;
    let total = (cfg.epochs * batches.batches_per_epoch()) as u64;
    let mut trainer = Trainer::new(cfg, train.shape(), train.num_classes(), total)?;
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
            let path = dir.join("config.txt");
            fs::write(&path, cfg.to_text()).map_err(|e| LabError::io(&path, e))?;
            let path = dir.join("metrics.csv");
            let mut w = create(&path)?;
            writeln!(w, "{METRICS_HEADER}").map_err(|e| LabError::io(&path, e))?;
            Some((path, w))
        }
        None => None,
    };
    let mut rows = Vec::with_capacity(total as usize);
    let mut test_err = f64::NAN;
    for epoch in 1..=cfg.epochs {
        let mut flip_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        flip_rng.set_stream(1 << 32 | epoch as u64);
        let plan = batches.next_epoch();
        let (mut wrong, mut seen) = (0, 0);
        for (b, idx) in plan.iter().enumerate() {
            let (x, y) = if cfg.hflip {
                train.batch_flipped(idx, &data::flip_mask(&mut flip_rng, idx.len()))
            } else {
                train.batch(idx)
            };
            let rec = trainer.train_step(&x, &y)?;
            wrong += rec.errors;
            seen += rec.batch;
            let last = b + 1 == plan.len();
            if last {
                test_err = evaluate(trainer.net_mut(), test)?;
            }
            let row = MetricsRow {
                iter: trainer.iteration(),
                epoch,
                raw_loss: rec.raw_loss,
                filtered_loss: rec.filtered_loss,
                grad_diff: rec.grad_diff,
                s: rec.s_next,
                lr: rec.lr,
                train_err: 100.0 * wrong as f64 / seen as f64,
                test_err: last.then_some(test_err),
            };
            if let Some((path, w)) = &mut csv {
                writeln!(w, "{row}").map_err(|e| LabError::io(path.as_path(), e))?;
            }
            rows.push(row);
        }
    }
    let summary = RunSummary {
        schedule: cfg.schedule,
        seed: cfg.seed,
        param_count: trainer.net().count_params(),
        iterations: trainer.iteration(),
        final_s: trainer.current_s()?,
        final_train_err: evaluate(trainer.net_mut(), train)?,
        final_test_err: test_err,
    };
    if let Some((path, mut w)) = csv {
        w.flush().map_err(|e| LabError::io(&path, e))?;
        let dir = out_dir.expect("csv implies a directory");
        let path = dir.join("summary.txt");
        fs::write(&path, summary.to_string()).map_err(|e| LabError::io(&path, e))?;
    }
    Ok(RunOutput { summary, rows })
}

/// Loads the data and runs, writing into `cfg.out_dir`.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    run_on(cfg, &train, &test, Some(&cfg.out_dir))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub schedule: ScheduleSpec,
    pub param_count: usize,
    pub test_errs: Vec<f64>,
    pub final_s: Vec<f64>,
}

impl SweepRow {
    pub fn label(&self) -> String {
        self.schedule.label()
    }

    pub fn mean_test_err(&self) -> f64 {
        mean(&self.test_errs)
    }

    pub fn mean_final_s(&self) -> f64 {
        mean(&self.final_s)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, schedule: &ScheduleSpec) -> Option<&SweepRow> {
        self.rows.iter().find(|r| &r.schedule == schedule)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("schedule,label,params,mean_test_err,mean_final_s");
        for s in &self.seeds {
            out.push_str(&format!(",test_err_seed{s}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}", r.schedule, r.label(), r.param_count, r.mean_test_err(), r.mean_final_s()));
            for e in &r.test_errs {
                out.push_str(&format!(",{e}"));
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for SweepTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>8} {:>14} {:>12}  test error per seed (%)", "schedule", "params", "mean test err", "mean final s")?;
        for r in &self.rows {
            let per: Vec<String> = r.test_errs.iter().map(|e| format!("{e:.2}")).collect();
            writeln!(f, "{:<12} {:>8} {:>14.3} {:>12.4}  {}", r.label(), r.param_count, r.mean_test_err(), r.mean_final_s(), per.join(" "))?;
        }
        Ok(())
    }
}

/// Runs every schedule for seeds `base.seed .. base.seed + seeds` on one
/// shared dataset; each run writes into `out_dir/<schedule>/seed<k>`.
pub fn sweep_schedules(base: &RunConfig, schedules: &[ScheduleSpec], seeds: usize) -> Result<SweepTable> {
    if schedules.len() < 2 {
        return Err(LabError::Config(format!("a sweep needs at least 2 schedules, got {}", schedules.len())));
    }
    if seeds == 0 {
        return Err(LabError::Config("a sweep needs at least one seed".into()));
    }
    base.validate()?;
    let (train, test) = load_data(base)?;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|k| base.seed + k).collect();
    let mut rows = Vec::new();
    for schedule in schedules {
        let mut row = SweepRow { schedule: *schedule, param_count: 0, test_errs: Vec::new(), final_s: Vec::new() };
        for &seed in &seed_list {
            let cfg = RunConfig { schedule: *schedule, seed, ..base.clone() };
            let dir: PathBuf = base.out_dir.join(schedule.to_string().replace(':', "-")).join(format!("seed{seed}"));
            let out = run_on(&cfg, &train, &test, Some(&dir))?;
            row.param_count = out.summary.param_count;
            row.test_errs.push(out.summary.final_test_err);
            row.final_s.push(out.summary.final_s);
        }
        rows.push(row);
    }
    let table = SweepTable { seeds: seed_list, rows };
    fs::create_dir_all(&base.out_dir).map_err(|e| LabError::io(&base.out_dir, e))?;
    for (name, text) in [("sweep.csv", table.to_csv()), ("sweep.txt", table.to_string())] {
        let path = base.out_dir.join(name);
        fs::write(&path, text).map_err(|e| LabError::io(&path, e))?;
    }
    Ok(table)
}

/// Loss values from a trace file: one number per line, or a CSV with a `raw_loss` column.
pub fn read_trace(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty()).peekable();
    let column = match lines.peek() {
        Some(first) if first.split(',').any(|c| c.trim() == "raw_loss") => {
            let col = first.split(',').position(|c| c.trim() == "raw_loss").expect("checked");
            lines.next();
            col
        }
        _ => 0,
    };
    lines
        .enumerate()
        .map(|(i, line)| {
            let field = line.split(',').nth(column).unwrap_or("").trim();
            field.parse::<f64>().map_err(|_| LabError::Config(format!("trace entry {}: not a number: `{field}`", i + 1)))
        })
        .collect()
}
