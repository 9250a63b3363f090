//! Loss-driven strength controller.
//!
//! Each iteration the raw training loss is pushed into a ring buffer, smoothed
//! with a normalized Gaussian window, and the sign of the backward difference
//! of the smoothed loss moves the dynamic factor `s` by `+delta_s` (loss
//! not increasing) or `-delta_s` (loss increasing). `s` never goes below 0.

use alloc::collections::VecDeque;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{invalid, Error, Result};

/// Window of `n + 1` weights, `w[k] ∝ exp(-((k - n/2) / (sigma * n/2))^2 / 2)`,
/// renormalized to unit sum.
pub fn gaussian_window(n: usize, sigma: f64) -> Result<Vec<f64>> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(invalid!("window order must be even and at least 2, got {n}"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid!("window sigma must be positive, got {sigma}"));
    }
    let half = n as f64 / 2.0;
    let spread = sigma * half;
    let mut w: Vec<f64> = (0..=n)
        .map(|k| {
            let z = (k as f64 - half) / spread;
            libm::exp(-0.5 * z * z)
        })
        .collect();
    // force exact symmetry before normalizing
    for k in 0..n / 2 {
        w[n - k] = w[k];
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Window for a filter of `length` taps; length 1 disables smoothing.
pub fn window_for_length(length: usize, sigma: f64) -> Result<Vec<f64>> {
    match length {
        1 => Ok(vec![1.0]),
        l if l % 2 == 1 => gaussian_window(l - 1, sigma),
        l => Err(invalid!("filter length must be odd, got {l}")),
    }
}

/// Smoothed value of the newest loss in `history` (chronological order).
///
/// `window[0]` weights the newest entry. With fewer entries than taps the
/// window is truncated to the available history and renormalized.
pub fn filtered_loss(history: &[f64], window: &[f64]) -> Result<f64> {
    filter_newest_first(history.iter().rev().copied(), window)
}

fn filter_newest_first(newest_first: impl Iterator<Item = f64>, window: &[f64]) -> Result<f64> {
    let (mut acc, mut mass, mut used) = (0.0, 0.0, 0);
    for (w, loss) in window.iter().zip(newest_first) {
        acc += w * loss;
        mass += w;
        used += 1;
    }
    if used == 0 {
        return Err(invalid!("cannot filter an empty loss history"));
    }
    Ok(if used == window.len() { acc } else { acc / mass })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub s0: f64,
    pub delta_s: f64,
    /// Number of filter taps (`N + 1`), odd.
    pub filter_length: usize,
    pub sigma: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { s0: 0.0, delta_s: 0.0003, filter_length: 501, sigma: 0.4 }
    }
}

/// What one [`Controller::step`] observed and decided.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub filtered: f64,
    /// Backward difference of the filtered loss; absent on the first step.
    pub diff: Option<f64>,
    /// Dynamic factor for the next iteration.
    pub s: f64,
}

#[derive(Debug, Clone)]
pub struct Controller {
    s: f64,
    delta_s: f64,
    window: Vec<f64>,
    buffer: VecDeque<f64>,
    prev_filtered: Option<f64>,
    iteration: u64,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self> {
        if !(config.s0 >= 0.0) {
            return Err(invalid!("initial dynamic factor must be non-negative, got {}", config.s0));
        }
        if !(config.delta_s > 0.0) || !config.delta_s.is_finite() {
            return Err(invalid!("delta_s must be positive, got {}", config.delta_s));
        }
        let window = window_for_length(config.filter_length, config.sigma)?;
        Ok(Self {
            s: config.s0,
            delta_s: config.delta_s,
            buffer: VecDeque::with_capacity(window.len()),
            window,
            prev_filtered: None,
            iteration: 0,
        })
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn delta_s(&self) -> f64 {
        self.delta_s
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn prev_filtered(&self) -> Option<f64> {
        self.prev_filtered
    }

    /// Feeds the raw loss of the iteration just completed. The returned `s`
    /// is the factor to sample with in the next iteration.
    pub fn step(&mut self, loss: f64) -> Result<StepOutcome> {
        if !loss.is_finite() {
            return Err(Error::NonFinite { iteration: self.iteration, value: loss });
        }
        if self.buffer.len() == self.window.len() {
            self.buffer.pop_front();
        }
        self.buffer.push_back(loss);
        let filtered = filter_newest_first(self.buffer.iter().rev().copied(), &self.window)?;
        let diff = self.prev_filtered.map(|prev| filtered - prev);
        if let Some(d) = diff {
            self.s = if d <= 0.0 { self.s + self.delta_s } else { (self.s - self.delta_s).max(0.0) };
        }
        self.prev_filtered = Some(filtered);
        self.iteration += 1;
        Ok(StepOutcome { filtered, diff, s: self.s })
    }
}

/// How the dynamic factor evolves over training.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ScheduleSpec {
    #[default]
    Dynamic,
    Fixed(f64),
    /// Ramp from 0 to the target over the run.
    Linear(f64),
    None,
}

impl ScheduleSpec {
    /// Factor for `iteration` out of `total`; `dynamic` is the controller's current value.
    pub fn value(&self, dynamic: f64, iteration: u64, total: u64) -> Result<f64> {
        match *self {
            ScheduleSpec::Dynamic => Ok(dynamic),
            ScheduleSpec::Fixed(x) => Ok(x),
            ScheduleSpec::Linear(x) => {
                if total == 0 || iteration > total {
                    return Err(invalid!("linear schedule at iteration {iteration} of {total}"));
                }
                Ok(x * iteration as f64 / total as f64)
            }
            ScheduleSpec::None => Ok(0.0),
        }
    }

    /// Row label in schedule comparison tables.
    pub fn label(&self) -> alloc::string::String {
        match self {
            ScheduleSpec::Dynamic => "Dynamic".to_string(),
            ScheduleSpec::Fixed(x) => alloc::format!("Fix-{x}"),
            ScheduleSpec::Linear(x) => alloc::format!("Linear-{x}"),
            ScheduleSpec::None => "Baseline".to_string(),
        }
    }
}

pub fn schedule_value(spec: &ScheduleSpec, controller: &Controller, iteration: u64, total: u64) -> Result<f64> {
    spec.value(controller.s(), iteration, total)
}

impl FromStr for ScheduleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let target = |v: &str| -> Result<f64> {
            let x: f64 = v.parse().map_err(|_| invalid!("bad schedule target `{v}`"))?;
            if x > 0.0 && x.is_finite() {
                Ok(x)
            } else {
                Err(invalid!("schedule target must be positive, got {x}"))
            }
        };
        match s.split_once(':') {
            None if s == "dynamic" => Ok(ScheduleSpec::Dynamic),
            None if s == "none" => Ok(ScheduleSpec::None),
            Some(("fix", v)) | Some(("fixed", v)) => Ok(ScheduleSpec::Fixed(target(v)?)),
            Some(("linear", v)) => Ok(ScheduleSpec::Linear(target(v)?)),
            _ => Err(invalid!("unknown schedule `{s}` (expected dynamic, none, fix:x or linear:x)")),
        }
    }
}

impl fmt::Display for ScheduleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleSpec::Dynamic => f.write_str("dynamic"),
            ScheduleSpec::Fixed(x) => write!(f, "fix:{x}"),
            ScheduleSpec::Linear(x) => write!(f, "linear:{x}"),
            ScheduleSpec::None => f.write_str("none"),
        }
    }
}

/// Dynamic factor after each loss of `losses` (the value the next iteration
/// would sample with).
pub fn replay_trace(losses: &[f64], spec: &ScheduleSpec, config: ControllerConfig) -> Result<Vec<f64>> {
    let mut controller = Controller::new(config)?;
    let total = losses.len() as u64;
    losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| {
            let out = controller.step(loss)?;
            spec.value(out.s, i as u64 + 1, total)
        })
        .collect()
}
