//! Gradient-leakage simulator for federated learning.
//!
//! Clients compute gradients on private images, optionally perturb or compress
//! them, and share them with a FedAvg server. An adversary intercepting a
//! shared update tries to rebuild the private image by gradient matching
//! (DLG, CPL) or cosine matching (GradInv). Reconstructions are scored with
//! MSE, SSIM and attack success rate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod defenses;
pub mod error;
pub mod flsim;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
