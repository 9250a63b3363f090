//! Dynamic regularization for residual and densely connected networks.
//!
//! Branch outputs are multiplied by a random scale `theta = A + s * r` whose
//! strength `s` follows the Gaussian-smoothed trend of the training loss.
//! The crate is `no_std` (with `alloc`) and carries the pure parts: a small
//! reverse-mode autodiff engine, the perturbation laws and their baselines,
//! the strength controller, the miniature network builders, and the SGD
//! update. IO, datasets and the training loop live in `dynreg-lab`.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod controller;
pub mod error;
pub mod nets;
pub mod optim;
pub mod perturb;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
