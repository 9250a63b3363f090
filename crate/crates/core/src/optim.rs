//! SGD with momentum and weight decay, and the cosine learning-rate schedule.

use alloc::vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// `lr0 * (1 + cos(pi * t / T)) / 2`.
pub fn cosine_lr(lr0: f64, t: u64, total: u64) -> Result<f64> {
    if t > total || total == 0 {
        return Err(invalid!("cosine schedule at step {t} of {total}"));
    }
    let phase = core::f64::consts::PI * t as f64 / total as f64;
    Ok(lr0 * 0.5 * (1.0 + libm::cos(phase)))
}

/// One update: `v <- momentum*v + grad + decay*param; param <- param - lr*v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::Shape {
            op: "sgd_step",
            shapes: vec![param.shape().to_vec(), grad.shape().to_vec(), velocity.shape().to_vec()],
        });
    }
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}
