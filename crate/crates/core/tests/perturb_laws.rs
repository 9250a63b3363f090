mod common;

use dynreg_core::perturb::{
    block_stream, shake_shake_scales, shakedrop_keep_prob, shakedrop_scale, Granularity, Mode, PerturbUnit,
    Regularizer,
};
use proptest::prelude::*;

const DRAWS: usize = 100_000;

fn draws(amplitude: f64, range: f64, s: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut unit = PerturbUnit::new(amplitude, range, 3, Granularity::PerBatch, seed).unwrap();
    let mut theta = Vec::with_capacity(DRAWS);
    let mut mu = Vec::with_capacity(DRAWS);
    for _ in 0..DRAWS {
        theta.push(unit.sample_theta(s, 1).unwrap()[0]);
        mu.push(unit.sample_mu(s, 1).unwrap()[0]);
    }
    (theta, mu)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Kolmogorov-Smirnov distance between the sample and Uniform[0, 1].
fn ks_uniform(sample: &[f64]) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = x.clamp(0.0, 1.0);
            (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn expectation_is_the_amplitude() {
    for (amp, range, s) in [(0.5, 1.0, 2.0), (0.5, 0.25, 1.0), (0.8, 0.5, 3.0)] {
        let (theta, mu) = draws(amp, range, s, 11);
        let bound = 3.0 * (s * range) / (3.0 * DRAWS as f64).sqrt();
        assert!((mean(&theta) - amp).abs() < bound, "theta mean {}", mean(&theta));
        assert!((mean(&mu) - amp).abs() < bound, "mu mean {}", mean(&mu));
    }
}

#[test]
fn mu_is_independent_of_theta() {
    let (theta, mu) = draws(0.5, 1.0, 1.0, 4);
    let (mt, mm) = (mean(&theta), mean(&mu));
    let cov: f64 = theta.iter().zip(&mu).map(|(a, b)| (a - mt) * (b - mm)).sum();
    let vt: f64 = theta.iter().map(|a| (a - mt).powi(2)).sum();
    let vm: f64 = mu.iter().map(|b| (b - mm).powi(2)).sum();
    let rho = cov / (vt * vm).sqrt();
    assert!(rho.abs() < 0.02, "rho = {rho}");
}

#[test]
fn shake_shake_embedding() {
    let (theta, mu) = draws(0.5, 0.5, 1.0, 8);
    assert!(theta.iter().chain(&mu).all(|t| (0.0..=1.0).contains(t)));
    let d = ks_uniform(&theta);
    assert!(d < 0.01, "KS statistic {d}");
}

#[test]
fn shake_shake_law() {
    let mut rng = block_stream(21, 1);
    let (alpha, beta): (Vec<f64>, Vec<f64>) = (0..DRAWS).map(|_| shake_shake_scales(&mut rng)).unzip();
    assert!(alpha.iter().chain(&beta).all(|a| (0.0..=1.0).contains(a)));
    assert!((mean(&alpha) - 0.5).abs() < 0.01);
    assert!(ks_uniform(&alpha) < 0.01);
}

#[test]
fn shakedrop_decay_rule() {
    for total in [4usize, 26, 110] {
        let probs: Vec<f64> = (1..=total).map(|l| shakedrop_keep_prob(l, total, 0.5).unwrap()).collect();
        for (l, p) in (1..=total).zip(&probs) {
            assert!((p - (1.0 - (l as f64 / total as f64) * 0.5)).abs() < 1e-15);
            assert!((0.5..=1.0).contains(p));
        }
        assert!(probs.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(probs[total - 1], 0.5);
    }
}

#[test]
fn shakedrop_gate_frequency() {
    let mut rng = block_stream(2, 7);
    let keep = shakedrop_keep_prob(3, 10, 0.5).unwrap();
    let n = DRAWS as f64;
    let mut kept = 0usize;
    for _ in 0..DRAWS {
        let (forward, backward) = shakedrop_scale(3, 10, 0.5, &mut rng).unwrap();
        assert!((-1.0..=1.0).contains(&forward));
        assert!((0.0..=1.0).contains(&backward));
        if forward == 1.0 {
            assert_eq!(backward, 1.0);
            kept += 1;
        }
    }
    let sd = (keep * (1.0 - keep) / n).sqrt();
    assert!((kept as f64 / n - keep).abs() < 4.0 * sd);
}

#[test]
fn per_sample_draws_one_scale_per_example() {
    let mut unit = PerturbUnit::new(0.5, 1.0, 1, Granularity::PerSample, 0).unwrap();
    let theta = unit.sample_theta(1.0, 7).unwrap().to_vec();
    assert_eq!(theta.len(), 7);
    assert!(theta.windows(2).any(|w| w[0] != w[1]));
    let mut reg = Regularizer::Dynamic(unit);
    let scales = reg.scales(Mode::Eval, 5.0, 7).unwrap();
    assert_eq!(scales.forward, vec![0.5]);
}

#[test]
fn streams_are_reproducible() {
    let (a, _) = draws(0.5, 1.0, 1.0, 77);
    let (b, _) = draws(0.5, 1.0, 1.0, 77);
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn draws_stay_in_range(amp in -1.0f64..2.0, range in 0.0f64..=1.0, s in 0.0f64..5.0, seed in any::<u64>()) {
        let mut unit = PerturbUnit::new(amp, range, 2, Granularity::PerSample, seed).unwrap();
        let lo = amp - s * range;
        let hi = amp + s * range;
        let eps = 1e-12;
        for _ in 0..20 {
            for &t in unit.sample_theta(s, 4).unwrap() {
                prop_assert!(t >= lo - eps && t <= hi + eps);
            }
            for &m in unit.sample_mu(s, 4).unwrap() {
                prop_assert!(m >= lo - eps && m <= hi + eps);
            }
        }
    }
}
