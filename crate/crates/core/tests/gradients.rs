mod common;

use common::*;
use dynreg_core::autodiff::{grad_check, BnMode, Graph, NodeId};
use dynreg_core::nets::{Net, NetSpec, RegMode, Topology, Widening};
use dynreg_core::perturb::{dense_forward, res2_forward, res3_forward};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;
const SEEDS: u64 = 20;

fn check(g: &mut Graph, loss: NodeId, what: &str) {
    let report = grad_check(g, loss, STEP).unwrap();
    assert!(report.passes(TOL), "{what}: max rel {} (mean {})", report.max_rel, report.mean_rel);
}

/// One randomized graph per op kind, checked over many seeds.
#[test]
fn every_op_kind_matches_finite_differences() {
    type Builder = fn(&mut Graph, &mut ChaCha8Rng) -> NodeId;
    let kinds: Vec<(&str, Builder)> = vec![
        ("matmul", |g, r| {
            let a = g.param(random_tensor(r, &[3, 4], 1.0));
            let b = g.param(random_tensor(r, &[4, 2], 1.0));
            let y = g.matmul(a, b).unwrap();
            probe_loss(g, y, r)
        }),
        ("conv2d 3x3 stride 1", |g, r| {
            let x = g.param(random_tensor(r, &[2, 2, 5, 4], 1.0));
            let w = g.param(random_tensor(r, &[3, 2, 3, 3], 0.5));
            let y = g.conv2d(x, w, 1).unwrap();
            probe_loss(g, y, r)
        }),
        ("conv2d 3x3 stride 2", |g, r| {
            let x = g.param(random_tensor(r, &[2, 2, 5, 6], 1.0));
            let w = g.param(random_tensor(r, &[2, 2, 3, 3], 0.5));
            let y = g.conv2d(x, w, 2).unwrap();
            probe_loss(g, y, r)
        }),
        ("conv2d 1x1 stride 2", |g, r| {
            let x = g.param(random_tensor(r, &[2, 3, 4, 4], 1.0));
            let w = g.param(random_tensor(r, &[2, 3, 1, 1], 0.5));
            let y = g.conv2d(x, w, 2).unwrap();
            probe_loss(g, y, r)
        }),
        ("add", |g, r| {
            let a = g.param(random_tensor(r, &[2, 3], 1.0));
            let b = g.param(random_tensor(r, &[2, 3], 1.0));
            let y = g.add(a, b).unwrap();
            probe_loss(g, y, r)
        }),
        ("mul", |g, r| {
            let a = g.param(random_tensor(r, &[5], 1.0));
            let b = g.param(random_tensor(r, &[5], 1.0));
            let y = g.mul(a, b).unwrap();
            probe_loss(g, y, r)
        }),
        ("scalar_mul", |g, r| {
            let a = g.param(random_tensor(r, &[4], 1.0));
            let y = g.scalar_mul(a, -1.7).unwrap();
            probe_loss(g, y, r)
        }),
        ("relu", |g, r| {
            let a = g.param(random_tensor(r, &[3, 5], 1.0));
            let y = g.relu(a).unwrap();
            probe_loss(g, y, r)
        }),
        ("batchnorm batch stats", |g, r| {
            let x = g.param(random_tensor(r, &[4, 3, 2, 2], 2.0));
            let gamma = g.param(random_tensor(r, &[3], 1.0));
            let beta = g.param(random_tensor(r, &[3], 1.0));
            let y = g.batchnorm(x, gamma, beta, BnMode::Batch { eps: 1e-5 }).unwrap();
            probe_loss(g, y, r)
        }),
        ("batchnorm running stats", |g, r| {
            let x = g.param(random_tensor(r, &[3, 2], 2.0));
            let gamma = g.param(random_tensor(r, &[2], 1.0));
            let beta = g.param(random_tensor(r, &[2], 1.0));
            let mode = BnMode::Running { mean: vec![0.3, -0.1], var: vec![1.5, 0.4], eps: 1e-5 };
            let y = g.batchnorm(x, gamma, beta, mode).unwrap();
            probe_loss(g, y, r)
        }),
        ("global_avg_pool", |g, r| {
            let x = g.param(random_tensor(r, &[2, 3, 2, 3], 1.0));
            let y = g.global_avg_pool(x).unwrap();
            probe_loss(g, y, r)
        }),
        ("concat", |g, r| {
            let a = g.param(random_tensor(r, &[2, 1, 2, 2], 1.0));
            let b = g.param(random_tensor(r, &[2, 3, 2, 2], 1.0));
            let y = g.concat(&[a, b]).unwrap();
            probe_loss(g, y, r)
        }),
        ("softmax_cross_entropy", |g, r| {
            let z = g.param(random_tensor(r, &[4, 5], 2.0));
            g.softmax_cross_entropy(z, &[0, 4, 2, 2]).unwrap()
        }),
        ("bias_add", |g, r| {
            let x = g.param(random_tensor(r, &[2, 3, 2, 1], 1.0));
            let b = g.param(random_tensor(r, &[3], 1.0));
            let y = g.bias_add(x, b).unwrap();
            probe_loss(g, y, r)
        }),
        ("pad_channels", |g, r| {
            let x = g.param(random_tensor(r, &[2, 2, 2, 2], 1.0));
            let y = g.pad_channels(x, 3).unwrap();
            probe_loss(g, y, r)
        }),
        ("shake (frozen, per sample)", |g, r| {
            let x = g.param(random_tensor(r, &[3, 2], 1.0));
            let y = g.shake(x, &[0.2, -0.4, 1.3], &[0.2, -0.4, 1.3]).unwrap();
            probe_loss(g, y, r)
        }),
    ];
    for (name, build) in kinds {
        for seed in 0..SEEDS {
            let mut r = rng(seed);
            let mut g = Graph::new();
            let loss = build(&mut g, &mut r);
            check(&mut g, loss, &format!("{name} seed {seed}"));
        }
    }
}

#[test]
fn linear_graphs_are_exact() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let x = g.input(random_tensor(&mut r, &[4, 3], 1.0));
        let w = g.param(random_tensor(&mut r, &[3, 2], 1.0));
        let b = g.param(random_tensor(&mut r, &[2], 1.0));
        let y = g.matmul(x, w).unwrap();
        let y = g.bias_add(y, b).unwrap();
        let loss = probe_loss(&mut g, y, &mut r);
        let report = grad_check(&mut g, loss, 1e-3).unwrap();
        assert!(report.max_rel < 1e-7, "seed {seed}: {}", report.max_rel);
    }
}

/// BN -> conv -> BN -> ReLU -> conv -> BN on a small feature map.
fn branch(g: &mut Graph, x: NodeId, r: &mut ChaCha8Rng, cin: usize, cout: usize) -> NodeId {
    let bn = |g: &mut Graph, x: NodeId, c: usize, r: &mut ChaCha8Rng| {
        let gamma = g.param(random_tensor(r, &[c], 1.0).map_add(1.0));
        let beta = g.param(random_tensor(r, &[c], 0.5));
        g.batchnorm(x, gamma, beta, BnMode::Batch { eps: 1e-5 }).unwrap()
    };
    let y = bn(g, x, cin, r);
    let w1 = g.param(random_tensor(r, &[cout, cin, 3, 3], 0.6));
    let y = g.conv2d(y, w1, 1).unwrap();
    let y = bn(g, y, cout, r);
    let y = g.relu(y).unwrap();
    let w2 = g.param(random_tensor(r, &[cout, cout, 3, 3], 0.6));
    let y = g.conv2d(y, w2, 1).unwrap();
    bn(g, y, cout, r)
}

trait MapAdd {
    fn map_add(self, c: f64) -> Self;
}

impl MapAdd for dynreg_core::Tensor {
    fn map_add(mut self, c: f64) -> Self {
        self.data_mut().iter_mut().for_each(|v| *v += c);
        self
    }
}

#[derive(Clone, Copy, Debug)]
enum Block {
    Res2,
    Res3,
    Dense,
}

fn block_graph(kind: Block, seed: u64, theta: &[f64], mu: &[f64]) -> (Graph, NodeId) {
    let mut r = rng(seed);
    let mut g = Graph::new();
    let x = g.param(random_tensor(&mut r, &[3, 2, 3, 3], 1.0));
    let out = match kind {
        Block::Res2 => {
            let f = branch(&mut g, x, &mut r, 2, 2);
            res2_forward(&mut g, x, f, theta, mu).unwrap()
        }
        Block::Res3 => {
            let f1 = branch(&mut g, x, &mut r, 2, 2);
            let f2 = branch(&mut g, x, &mut r, 2, 2);
            res3_forward(&mut g, x, f1, f2, theta, mu).unwrap()
        }
        Block::Dense => {
            let gamma = g.param(random_tensor(&mut r, &[2], 1.0).map_add(1.0));
            let beta = g.param(random_tensor(&mut r, &[2], 0.5));
            let y = g.batchnorm(x, gamma, beta, BnMode::Batch { eps: 1e-5 }).unwrap();
            let y = g.relu(y).unwrap();
            let w = g.param(random_tensor(&mut r, &[2, 2, 3, 3], 0.6));
            let y = g.conv2d(y, w, 1).unwrap();
            dense_forward(&mut g, x, y, theta, mu).unwrap()
        }
    };
    let loss = probe_loss(&mut g, out, &mut r);
    (g, loss)
}

#[test]
fn frozen_blocks_pass_gradient_check() {
    for seed in 0..SEEDS {
        let (mut g, loss) = block_graph(Block::Res2, seed, &[0.7], &[0.7]);
        check(&mut g, loss, &format!("res2 seed {seed}"));
        let (mut g, loss) = block_graph(Block::Res3, seed, &[0.5], &[0.5]);
        check(&mut g, loss, &format!("res3 seed {seed}"));
        let (mut g, loss) = block_graph(Block::Dense, seed, &[0.8, -0.3, 1.6], &[0.8, -0.3, 1.6]);
        check(&mut g, loss, &format!("dense seed {seed}"));
    }
}

fn assert_matches_surrogate(g: &Graph, loss: NodeId, what: &str) {
    let grads = g.backward(loss).unwrap();
    let mut sur = surrogate(g);
    let mut worst = 0.0f64;
    for p in g.params() {
        let numeric = central_diff(&mut sur, loss, p, STEP);
        for (a, n) in grads.get(p).unwrap().data().iter().zip(numeric) {
            worst = worst.max(rel_err(*a, n));
        }
    }
    assert!(worst < TOL, "{what}: max rel {worst}");
}

#[test]
fn decoupled_backward_is_the_surrogate_gradient() {
    for seed in 0..SEEDS {
        for kind in [Block::Res2, Block::Res3, Block::Dense] {
            let (g, loss) = block_graph(kind, seed, &[0.9], &[0.2]);
            assert_matches_surrogate(&g, loss, &format!("{kind:?} seed {seed}"));
            // the true function's gradient differs when mu != theta
            let grads = g.backward(loss).unwrap();
            let (frozen, floss) = block_graph(kind, seed, &[0.9], &[0.9]);
            let fgrads = frozen.backward(floss).unwrap();
            let differs = g.params().any(|p| grads.get(p).unwrap().max_abs_diff(fgrads.get(p).unwrap()) > 1e-6);
            assert!(differs, "{kind:?}: backward ignored mu");
        }
    }
}

fn tiny(topology: Topology, reg_mode: RegMode, seed: u64) -> NetSpec {
    NetSpec {
        topology,
        depth: 2,
        width: 3,
        widening: if topology == Topology::Dense { Widening::Growth(2) } else { Widening::Pyramid(2) },
        num_classes: 3,
        input_shape: [2, 3, 3],
        reg_mode,
        amplitude: 0.7,
        seed,
        ..NetSpec::default()
    }
}

#[test]
fn whole_nets_frozen_and_decoupled() {
    for topology in [Topology::Res2, Topology::Res3, Topology::Dense] {
        for seed in 0..3 {
            let spec = tiny(topology, RegMode::Perturb, seed);
            let mut net = Net::new(spec.clone()).unwrap();
            let mut r = rng(100 + seed);
            let input = random_tensor(&mut r, &[4, 2, 3, 3], 1.0);
            let labels = [0, 2, 1, 2];

            // s = 0 freezes every perturbation at theta = mu = A
            let mut g = Graph::new();
            let out = net.forward(&mut g, &input, Some(&labels), 0.0).unwrap();
            check(&mut g, out.loss.unwrap(), &format!("{topology:?} net s=0 seed {seed}"));

            let mut g = Graph::new();
            let out = net.forward(&mut g, &input, Some(&labels), 1.5).unwrap();
            assert!(out.blocks.iter().all(|b| b.scales.forward != b.scales.backward));
            assert!(grad_check(&mut g, out.loss.unwrap(), STEP).is_err());
            let loss = out.loss.unwrap();
            let grads = g.backward(loss).unwrap();
            let (mut sur, map) = tangent_surrogate(&g);
            assert!((sur.value(map[loss.index()]).item() - g.value(loss).item()).abs() < 1e-12);
            let mut worst = 0.0f64;
            for p in g.params() {
                let numeric = central_diff(&mut sur, map[loss.index()], map[p.index()], STEP);
                for (a, n) in grads.get(p).unwrap().data().iter().zip(numeric) {
                    worst = worst.max(rel_err(*a, n));
                }
            }
            assert!(worst < TOL, "{topology:?} net s=1.5 seed {seed}: max rel {worst}");
        }
    }
}
