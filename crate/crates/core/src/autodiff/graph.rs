use alloc::vec;
use alloc::vec::Vec;

use super::ops::{self, BnMode, Ctx, Op};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a node inside its [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    ctx: Ctx,
    requires_grad: bool,
}

/// Append-only tape. Nodes only reference earlier nodes, so stored order is a
/// valid evaluation order.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf { trainable },
            inputs: Vec::new(),
            value,
            ctx: Ctx::None,
            requires_grad: trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and appends the result.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        for id in inputs {
            self.check(*id)?;
        }
        let (value, ctx) = {
            let vals: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            ops::forward(&op, &vals)?
        };
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node { op, inputs: inputs.to_vec(), value, ctx, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(id.0))
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Trainable leaves in creation order.
    pub fn params(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { trainable: true }))
            .map(|(i, _)| NodeId(i))
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Per-channel `(mean, var)` computed by a batch-statistics batchnorm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match (&self.nodes[id.0].op, &self.nodes[id.0].ctx) {
            (Op::BatchNorm(BnMode::Batch { .. }), Ctx::BatchNorm { mean, var, .. }) => Some((mean, var)),
            _ => None,
        }
    }

    /// Replaces a leaf's value; call [`Graph::recompute`] afterwards.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        self.check(id)?;
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf { .. }) {
            return Err(Error::NotALeaf(id.0));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::Shape { op: "leaf", shapes: vec![node.value.shape().to_vec(), value.shape().to_vec()] });
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every non-leaf node in stored order.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let (value, ctx) = {
                let node = &self.nodes[i];
                let vals: Vec<&Tensor> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                ops::forward(&node.op, &vals)?
            };
            self.nodes[i].value = value;
            self.nodes[i].ctx = ctx;
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`. `Shake` nodes propagate with their
    /// backward scales.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.check(loss)?;
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss { node: loss.0, shape: loss_value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let vals: Vec<&Tensor> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|id| self.nodes[id.0].requires_grad).collect();
            let input_grads = ops::backward(&node.op, &vals, &node.value, &node.ctx, &dy, &needs);
            for (id, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(dy);
        }
        for id in self.params() {
            if grads[id.0].is_none() {
                grads[id.0] = Some(Tensor::zeros(self.nodes[id.0].value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    // Convenience wrappers around `apply`.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> Result<NodeId> {
        self.apply(Op::Conv2d { stride }, &[x, w])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scalar_mul(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::ScalarMul(c), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }

    pub fn batchnorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mode: BnMode) -> Result<NodeId> {
        self.apply(Op::BatchNorm(mode), &[x, gamma, beta])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::GlobalAvgPool, &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.apply(Op::Concat, xs)
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.apply(Op::SoftmaxCrossEntropy { labels: labels.to_vec() }, &[logits])
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::BiasAdd, &[x, b])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[x])
    }

    pub fn pad_channels(&mut self, x: NodeId, extra: usize) -> Result<NodeId> {
        self.apply(Op::PadChannels { extra }, &[x])
    }

    pub fn shake(&mut self, x: NodeId, forward: &[f64], backward: &[f64]) -> Result<NodeId> {
        self.apply(Op::Shake { forward: forward.to_vec(), backward: backward.to_vec() }, &[x])
    }
}

/// Gradient of the loss with respect to each node that required one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_slice(&[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.input(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let m = g.input(Tensor::from_fn(&[3, 3], |i| i as f64 * 0.5 - 1.0));
        let y = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(y), g.value(m));
    }

    #[test]
    fn unit_conv_is_identity() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[2, 1, 4, 5], |i| (i as f64).sin()));
        let w = g.input(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, w, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv3x3_matches_direct_sum() {
        // 3x3 input, all-ones kernel: each output is the sum of its zero-padded neighbourhood.
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 + 1.0));
        let w = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, 1).unwrap();
        assert_eq!(g.value(y).data(), &[12., 21., 16., 27., 45., 33., 24., 39., 28.]);
        let y2 = g.conv2d(x, w, 2).unwrap();
        assert_eq!(g.value(y2).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y2).data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err, Error::Shape { op: "matmul", shapes: vec![vec![2, 3], vec![2, 3]] });
        let c = g.input(Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
        let x = g.input(Tensor::zeros(&[1, 1, 4, 4]));
        let w5 = g.input(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(g.conv2d(x, w5, 1), Err(Error::Attribute { op: "conv2d", .. })));
    }

    #[test]
    fn gradient_of_linear_form_is_the_input() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_slice(&[0.3, -0.2, 0.9]));
        let x = g.input(Tensor::from_slice(&[1.0, 2.0, -4.0]));
        let p = g.mul(w, x).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0, -4.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn relu_gradient_is_piecewise() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_slice(&[-1.0, 2.0]));
        let r = g.relu(w).unwrap();
        let loss = g.sum(r).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_slice(&[1.0, 2.0]));
        let r = g.relu(w).unwrap();
        assert!(matches!(g.backward(r), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn unused_params_get_zero_gradients() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_slice(&[1.0]));
        let unused = g.param(Tensor::zeros(&[2, 2]));
        let loss = g.sum(w).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn shake_uses_backward_scale() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_slice(&[2.0, 3.0]));
        let s = g.shake(w, &[0.5], &[0.25]).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 1.5]);
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.25, 0.25]);
    }

    #[test]
    fn concat_and_pad_channels() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_fn(&[2, 1, 1, 2], |i| i as f64));
        let b = g.input(Tensor::from_fn(&[2, 2, 1, 2], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3, 1, 2]);
        assert_eq!(g.value(c).data(), &[0., 1., 10., 11., 12., 13., 2., 3., 14., 15., 16., 17.]);
        let p = g.pad_channels(a, 2).unwrap();
        assert_eq!(g.value(p).data(), &[0., 1., 0., 0., 0., 0., 2., 3., 0., 0., 0., 0.]);
    }

    #[test]
    fn running_batchnorm_uses_given_stats() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 1], &[3.0, 5.0]));
        let gamma = g.param(Tensor::from_slice(&[2.0]));
        let beta = g.param(Tensor::from_slice(&[1.0]));
        let mode = BnMode::Running { mean: vec![1.0], var: vec![4.0], eps: 0.0 };
        let y = g.batchnorm(x, gamma, beta, mode).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0]);
        let yb = g.batchnorm(x, gamma, beta, BnMode::Batch { eps: 0.0 }).unwrap();
        assert_eq!(g.value(yb).data(), &[-1.0, 3.0]);
        let (mean, var) = g.batch_stats(yb).unwrap();
        assert_eq!((mean, var), (&[4.0][..], &[1.0][..]));
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let z = g.param(Tensor::zeros(&[2, 4]));
        let loss = g.softmax_cross_entropy(z, &[1, 3]).unwrap();
        assert!((g.value(loss).item() - libm::log(4.0)).abs() < 1e-15);
        assert!(g.softmax_cross_entropy(z, &[1, 4]).is_err());
    }

    #[test]
    fn recompute_tracks_leaf_updates() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_slice(&[1.0, 2.0]));
        let y = g.scalar_mul(w, 3.0).unwrap();
        let loss = g.sum(y).unwrap();
        g.set_leaf(w, Tensor::from_slice(&[0.0, 1.0])).unwrap();
        g.recompute().unwrap();
        assert_eq!(g.value(loss).item(), 3.0);
        assert!(matches!(g.set_leaf(y, Tensor::zeros(&[2])), Err(Error::NotALeaf(_))));
    }
}
