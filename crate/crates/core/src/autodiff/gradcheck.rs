use alloc::vec::Vec;

use super::graph::{Graph, NodeId};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that gradients which are
/// zero up to rounding compare on an absolute scale.
const REL_FLOOR: f64 = 1e-6;

/// Worst and average relative error for one trainable leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafCheck {
    pub node: NodeId,
    pub max_rel: f64,
    pub mean_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafCheck>,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub count: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backward gradients with central differences of step `step`
/// for every element of every trainable leaf.
///
/// The graph is restored to its original leaf values before returning.
pub fn grad_check(graph: &mut Graph, loss: NodeId, step: f64) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(crate::error::invalid!("finite-difference step must be positive, got {step}"));
    }
    if let Some(id) = graph.node_ids().find(|&id| graph.op(id).is_unfrozen()) {
        return Err(Error::Unfrozen(id.index()));
    }
    let grads = graph.backward(loss)?;
    let params: Vec<NodeId> = graph.params().collect();
    let mut leaves = Vec::with_capacity(params.len());
    let (mut total, mut count, mut worst) = (0.0, 0usize, 0.0f64);
    for id in params {
        let original = graph.value(id).clone();
        let analytic = grads.get(id).expect("params always receive gradients").clone();
        let (mut leaf_max, mut leaf_sum) = (0.0f64, 0.0);
        for i in 0..original.len() {
            let mut probe = original.clone();
            probe.data_mut()[i] += step;
            graph.set_leaf(id, probe.clone())?;
            graph.recompute()?;
            let plus = graph.value(loss).item();
            probe.data_mut()[i] = original.data()[i] - step;
            graph.set_leaf(id, probe)?;
            graph.recompute()?;
            let minus = graph.value(loss).item();
            let numeric = (plus - minus) / (2.0 * step);
            let rel = relative_error(analytic.data()[i], numeric);
            leaf_max = leaf_max.max(rel);
            leaf_sum += rel;
        }
        graph.set_leaf(id, original.clone())?;
        worst = worst.max(leaf_max);
        total += leaf_sum;
        count += original.len();
        leaves.push(LeafCheck { node: id, max_rel: leaf_max, mean_rel: leaf_sum / original.len() as f64 });
    }
    graph.recompute()?;
    Ok(GradCheckReport { leaves, max_rel: worst, mean_rel: if count > 0 { total / count as f64 } else { 0.0 }, count })
}
