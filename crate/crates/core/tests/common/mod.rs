#![allow(dead_code)]

use dynreg_core::autodiff::{Graph, NodeId, Op};
use dynreg_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * (2.0 * rng.gen::<f64>() - 1.0))
}

/// Central-difference gradient of the scalar at `loss` with respect to `leaf`.
pub fn central_diff(g: &mut Graph, loss: NodeId, leaf: NodeId, h: f64) -> Vec<f64> {
    let original = g.value(leaf).clone();
    let mut out = Vec::with_capacity(original.len());
    for i in 0..original.len() {
        let mut p = original.clone();
        p.data_mut()[i] += h;
        g.set_leaf(leaf, p.clone()).unwrap();
        g.recompute().unwrap();
        let plus = g.value(loss).item();
        p.data_mut()[i] = original.data()[i] - h;
        g.set_leaf(leaf, p).unwrap();
        g.recompute().unwrap();
        let minus = g.value(loss).item();
        out.push((plus - minus) / (2.0 * h));
    }
    g.set_leaf(leaf, original).unwrap();
    g.recompute().unwrap();
    out
}

/// Copy of `g` in which every shake node uses its backward scales in the
/// forward pass too, so its plain derivative is what backward should produce.
pub fn surrogate(g: &Graph) -> Graph {
    let mut s = Graph::new();
    for id in g.node_ids() {
        let new = match g.op(id) {
            Op::Leaf { trainable: true } => s.param(g.value(id).clone()),
            Op::Leaf { trainable: false } => s.input(g.value(id).clone()),
            Op::Shake { backward, .. } => {
                let op = Op::Shake { forward: backward.clone(), backward: backward.clone() };
                s.apply(op, g.inputs(id)).unwrap()
            }
            op => s.apply(op.clone(), g.inputs(id)).unwrap(),
        };
        assert_eq!(new, id);
    }
    s
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Weighted sum of `x` with fixed random weights: a scalar loss with a
/// non-degenerate gradient everywhere.
pub fn probe_loss(g: &mut Graph, x: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let weights = random_tensor(rng, g.value(x).shape(), 1.0);
    let w = g.input(weights);
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

/// Copy of `g` in which every shake node becomes the affine map
/// `mu * x + (theta - mu) * x0` around its recorded input `x0`: same forward
/// values, slope `mu`. Returns the new graph and the old-to-new id map.
pub fn tangent_surrogate(g: &Graph) -> (Graph, Vec<NodeId>) {
    let mut s = Graph::new();
    let mut map: Vec<NodeId> = Vec::new();
    for id in g.node_ids() {
        let inputs: Vec<NodeId> = g.inputs(id).iter().map(|i| map[i.index()]).collect();
        let new = match g.op(id) {
            Op::Leaf { trainable: true } => s.param(g.value(id).clone()),
            Op::Leaf { trainable: false } => s.input(g.value(id).clone()),
            Op::Shake { backward, .. } => {
                let slope = s.shake(inputs[0], backward, backward).unwrap();
                let at_base = s.value(slope).clone();
                let offset = g.value(id).zip_sub(&at_base);
                let c = s.input(offset);
                s.add(slope, c).unwrap()
            }
            op => s.apply(op.clone(), &inputs).unwrap(),
        };
        map.push(new);
    }
    (s, map)
}

trait ZipSub {
    fn zip_sub(&self, other: &Tensor) -> Tensor;
}

impl ZipSub for Tensor {
    fn zip_sub(&self, other: &Tensor) -> Tensor {
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Tensor::new(self.shape().to_vec(), data).unwrap()
    }
}
