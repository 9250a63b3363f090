//! Perturbation laws for residual and dense branches.
//!
//! The dynamic law scales a branch by `theta = A + s * r` with
//! `r ~ Uniform[-R_l, R_l]`, and propagates gradients with an independent
//! draw `mu` from the same law. At inference the scale folds to `A`.
//! Shake-Shake and ShakeDrop are provided as fixed-strength baselines.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// How many independent scales are drawn per block and mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Granularity {
    #[default]
    PerBatch,
    PerSample,
}

impl Granularity {
    pub fn name(&self) -> &'static str {
        match self {
            Granularity::PerBatch => "per_batch",
            Granularity::PerSample => "per_sample",
        }
    }

    fn draws(self, batch: usize) -> usize {
        match self {
            Granularity::PerBatch => 1,
            Granularity::PerSample => batch,
        }
    }
}

/// Independent random stream for block `block` under master seed `seed`.
pub fn block_stream(seed: u64, block: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block as u64);
    rng
}

/// Linear enhancement rule: noise half-range `l / L` for block `l` of `L`.
pub fn noise_range(l: usize, total: usize) -> Result<f64> {
    if l == 0 || l > total {
        return Err(invalid!("block index {l} outside 1..={total}"));
    }
    Ok(l as f64 / total as f64)
}

/// Per-block state of the dynamic perturbation.
#[derive(Debug, Clone)]
pub struct PerturbUnit {
    amplitude: f64,
    range: f64,
    block: usize,
    granularity: Granularity,
    clamp: bool,
    mode: Mode,
    theta: Vec<f64>,
    mu: Vec<f64>,
    theta_fresh: bool,
    rng: ChaCha8Rng,
}

impl PerturbUnit {
    pub fn new(amplitude: f64, range: f64, block: usize, granularity: Granularity, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&range) {
            return Err(invalid!("noise range {range} outside [0, 1]"));
        }
        if block == 0 {
            return Err(invalid!("block indices start at 1"));
        }
        Ok(Self {
            amplitude,
            range,
            block,
            granularity,
            clamp: false,
            mode: Mode::Train,
            theta: vec![amplitude],
            mu: vec![amplitude],
            theta_fresh: false,
            rng: block_stream(seed, block),
        })
    }

    /// Clamp sampled scales into `[0, 1]`.
    pub fn with_clamp(mut self, clamp: bool) -> Self {
        self.clamp = clamp;
        self
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    fn draw(&mut self, s: f64, batch: usize) -> Result<Vec<f64>> {
        if self.mode == Mode::Eval {
            return Err(Error::EvalMode("sampling a perturbation"));
        }
        if !(s >= 0.0) {
            return Err(invalid!("dynamic factor must be non-negative, got {s}"));
        }
        let (amp, half, clamp) = (self.amplitude, self.range, self.clamp);
        let draws = self.granularity.draws(batch);
        Ok((0..draws)
            .map(|_| {
                let r = half * (2.0 * self.rng.gen::<f64>() - 1.0);
                let v = amp + s * r;
                if clamp {
                    v.clamp(0.0, 1.0)
                } else {
                    v
                }
            })
            .collect())
    }

    /// Forward scale(s) for this iteration.
    pub fn sample_theta(&mut self, s: f64, batch: usize) -> Result<&[f64]> {
        self.theta = self.draw(s, batch)?;
        self.theta_fresh = true;
        Ok(&self.theta)
    }

    /// Backward scale(s), independent of the forward draw.
    pub fn sample_mu(&mut self, s: f64, batch: usize) -> Result<&[f64]> {
        if !self.theta_fresh {
            return Err(invalid!("backward scale requested before a forward scale was drawn"));
        }
        self.mu = self.draw(s, batch)?;
        self.theta_fresh = false;
        Ok(&self.mu)
    }

    /// Expected scale, used at inference.
    pub fn fold_inference(&self) -> f64 {
        self.amplitude
    }
}

/// `x + theta * branch`, with gradients through the branch scaled by `mu`.
pub fn res2_forward(g: &mut Graph, x: NodeId, branch: NodeId, theta: &[f64], mu: &[f64]) -> Result<NodeId> {
    let scaled = g.shake(branch, theta, mu)?;
    g.add(x, scaled)
}

/// `x + theta * b1 + (1 - theta) * b2`, backward with `mu` and `1 - mu`.
pub fn res3_forward(g: &mut Graph, x: NodeId, b1: NodeId, b2: NodeId, theta: &[f64], mu: &[f64]) -> Result<NodeId> {
    let complement = |v: &[f64]| v.iter().map(|t| 1.0 - t).collect::<Vec<_>>();
    let s1 = g.shake(b1, theta, mu)?;
    let s2 = g.shake(b2, &complement(theta), &complement(mu))?;
    let branches = g.add(s1, s2)?;
    g.add(x, branches)
}

/// Channel concatenation of `prev` with the scaled new features.
pub fn dense_forward(g: &mut Graph, prev: NodeId, conv_out: NodeId, theta: &[f64], mu: &[f64]) -> Result<NodeId> {
    let scaled = g.shake(conv_out, theta, mu)?;
    g.concat(&[prev, scaled])
}

/// Shake-Shake draws: forward `alpha` and backward `beta`, both `Uniform[0, 1]`.
pub fn shake_shake_scales<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    (rng.gen::<f64>(), rng.gen::<f64>())
}

/// Keep probability of ShakeDrop's linear decay rule.
pub fn shakedrop_keep_prob(l: usize, total: usize, terminal: f64) -> Result<f64> {
    if l == 0 || l > total {
        return Err(invalid!("block index {l} outside 1..={total}"));
    }
    if !(0.0..=1.0).contains(&terminal) {
        return Err(invalid!("terminal keep probability {terminal} outside [0, 1]"));
    }
    Ok(1.0 - (l as f64 / total as f64) * (1.0 - terminal))
}

/// One ShakeDrop draw: `(forward, backward)` scales.
///
/// The gate `b ~ Bernoulli(p_l)`; forward is `b + alpha - b*alpha` with
/// `alpha ~ U[-1, 1]`, backward is `b + beta - b*beta` with `beta ~ U[0, 1]`.
pub fn shakedrop_scale<R: Rng + ?Sized>(l: usize, total: usize, terminal: f64, rng: &mut R) -> Result<(f64, f64)> {
    let keep = shakedrop_keep_prob(l, total, terminal)?;
    let gate = if rng.gen::<f64>() < keep { 1.0 } else { 0.0 };
    let alpha = 2.0 * rng.gen::<f64>() - 1.0;
    let beta = rng.gen::<f64>();
    // b + (1 - b) * x equals b + x - b * x and is exact for b in {0, 1}
    Ok((gate + (1.0 - gate) * alpha, gate + (1.0 - gate) * beta))
}

/// Per-block regularizer attached to a network block.
#[derive(Debug, Clone)]
pub enum Regularizer {
    /// Fixed branch scale (1 for a plain residual block).
    Constant(f64),
    Dynamic(PerturbUnit),
    ShakeShake { granularity: Granularity, rng: ChaCha8Rng },
    ShakeDrop { block: usize, total: usize, terminal: f64, granularity: Granularity, rng: ChaCha8Rng },
}

/// Forward and backward scales for one block and iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Scales {
    pub forward: Vec<f64>,
    pub backward: Vec<f64>,
}

impl Scales {
    pub fn constant(v: f64) -> Self {
        Self { forward: vec![v], backward: vec![v] }
    }
}

impl Regularizer {
    /// Scales to use in this iteration. In eval mode every law returns its
    /// expectation.
    pub fn scales(&mut self, mode: Mode, s: f64, batch: usize) -> Result<Scales> {
        match self {
            Regularizer::Constant(v) => Ok(Scales::constant(*v)),
            Regularizer::Dynamic(unit) => {
                unit.set_mode(mode);
                if mode == Mode::Eval {
                    return Ok(Scales::constant(unit.fold_inference()));
                }
                let forward = unit.sample_theta(s, batch)?.to_vec();
                let backward = unit.sample_mu(s, batch)?.to_vec();
                Ok(Scales { forward, backward })
            }
            Regularizer::ShakeShake { granularity, rng } => {
                if mode == Mode::Eval {
                    return Ok(Scales::constant(0.5));
                }
                let (forward, backward) = (0..granularity.draws(batch)).map(|_| shake_shake_scales(rng)).unzip();
                Ok(Scales { forward, backward })
            }
            Regularizer::ShakeDrop { block, total, terminal, granularity, rng } => {
                if mode == Mode::Eval {
                    return Ok(Scales::constant(shakedrop_keep_prob(*block, *total, *terminal)?));
                }
                let mut forward = Vec::new();
                let mut backward = Vec::new();
                for _ in 0..granularity.draws(batch) {
                    let (f, b) = shakedrop_scale(*block, *total, *terminal, rng)?;
                    forward.push(f);
                    backward.push(b);
                }
                Ok(Scales { forward, backward })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn noise_range_examples() {
        assert_eq!(noise_range(12, 12).unwrap(), 1.0);
        assert_eq!(noise_range(3, 6).unwrap(), 0.5);
        assert!((noise_range(1, 12).unwrap() - 0.083_333_333_333_333_33).abs() < 1e-15);
        assert!(noise_range(0, 4).is_err());
        assert!(noise_range(5, 4).is_err());
    }

    #[test]
    fn zero_strength_gives_amplitude() {
        let mut u = PerturbUnit::new(0.5, 1.0, 3, Granularity::PerBatch, 99).unwrap();
        for _ in 0..10 {
            assert_eq!(u.sample_theta(0.0, 8).unwrap(), &[0.5]);
            assert_eq!(u.sample_mu(0.0, 8).unwrap(), &[0.5]);
        }
    }

    #[test]
    fn theta_stays_in_interval() {
        let mut u = PerturbUnit::new(0.5, 1.0, 1, Granularity::PerSample, 5).unwrap();
        let mut seen = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..2000 {
            for &t in u.sample_theta(2.0, 16).unwrap() {
                assert!((-1.5..=2.5).contains(&t));
                seen = (seen.0.min(t), seen.1.max(t));
            }
            u.sample_mu(2.0, 16).unwrap();
        }
        // unclamped: scales do leave [0, 1]
        assert!(seen.0 < -1.0 && seen.1 > 2.0);
    }

    #[test]
    fn clamp_flag_bounds_theta() {
        let mut u = PerturbUnit::new(0.5, 1.0, 1, Granularity::PerSample, 5).unwrap().with_clamp(true);
        assert!(u.sample_theta(3.0, 500).unwrap().iter().all(|t| (0.0..=1.0).contains(t)));
    }

    #[test]
    fn eval_mode_refuses_sampling() {
        let mut u = PerturbUnit::new(0.5, 0.5, 1, Granularity::PerBatch, 1).unwrap();
        u.set_mode(Mode::Eval);
        assert!(matches!(u.sample_theta(1.0, 1), Err(Error::EvalMode(_))));
        assert_eq!(u.fold_inference(), 0.5);
    }

    #[test]
    fn mu_requires_theta_first() {
        let mut u = PerturbUnit::new(0.5, 0.5, 1, Granularity::PerBatch, 1).unwrap();
        assert!(u.sample_mu(1.0, 1).is_err());
        u.sample_theta(1.0, 1).unwrap();
        assert!(u.sample_mu(1.0, 1).is_ok());
    }

    #[test]
    fn res2_and_res3_arithmetic() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_slice(&[1.0]));
        let b = g.input(Tensor::from_slice(&[2.0]));
        let y = res2_forward(&mut g, x, b, &[0.5], &[0.5]).unwrap();
        assert_eq!(g.value(y).data(), &[2.0]);
        let y0 = res2_forward(&mut g, x, b, &[0.0], &[0.0]).unwrap();
        assert_eq!(g.value(y0), g.value(x));

        let z = g.input(Tensor::from_slice(&[0.0]));
        let b1 = g.input(Tensor::from_slice(&[2.0]));
        let b2 = g.input(Tensor::from_slice(&[4.0]));
        let y3 = res3_forward(&mut g, z, b1, b2, &[0.5], &[0.5]).unwrap();
        assert_eq!(g.value(y3).data(), &[3.0]);
        let same = res3_forward(&mut g, x, b1, b1, &[0.37], &[0.9]).unwrap();
        assert_eq!(g.value(same).data(), &[3.0]);
    }

    #[test]
    fn dense_forward_extremes() {
        let mut g = Graph::new();
        let prev = g.input(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let new = g.input(Tensor::from_fn(&[1, 1, 2, 2], |i| 1.0 + i as f64));
        let plain = dense_forward(&mut g, prev, new, &[1.0], &[1.0]).unwrap();
        assert_eq!(g.value(plain).data(), &[0., 1., 2., 3., 4., 5., 6., 7., 1., 2., 3., 4.]);
        let zeroed = dense_forward(&mut g, prev, new, &[0.0], &[0.0]).unwrap();
        assert_eq!(&g.value(zeroed).data()[..8], g.value(prev).data());
        assert!(g.value(zeroed).data()[8..].iter().all(|&v| v == 0.0));
        let mismatch = g.input(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(dense_forward(&mut g, prev, mismatch, &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn shakedrop_examples() {
        assert_eq!(shakedrop_keep_prob(4, 4, 0.5).unwrap(), 0.5);
        assert!((shakedrop_keep_prob(1, 10, 0.5).unwrap() - 0.95).abs() < 1e-15);
        // keep prob 1 forces the gate open: the original network
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(shakedrop_scale(1, 1, 1.0, &mut rng).unwrap(), (1.0, 1.0));
        }
    }

    #[test]
    fn eval_scales_are_expectations() {
        let mut ss = Regularizer::ShakeShake { granularity: Granularity::PerBatch, rng: block_stream(0, 1) };
        assert_eq!(ss.scales(Mode::Eval, 0.0, 4).unwrap(), Scales::constant(0.5));
        let mut sd = Regularizer::ShakeDrop {
            block: 1,
            total: 10,
            terminal: 0.5,
            granularity: Granularity::PerBatch,
            rng: block_stream(0, 1),
        };
        assert!((sd.scales(Mode::Eval, 0.0, 4).unwrap().forward[0] - 0.95).abs() < 1e-15);
    }
}
