//! Minimal reverse-mode automatic differentiation over dense CPU tensors.
//!
//! Record a computation on a [`Graph`] through [`Var`] handles, then call
//! [`Graph::backward`] once on a scalar loss:
//!
//! ```
//! use dualvae_autodiff::{Graph, Tensor};
//!
//! let g = Graph::<f64>::new();
//! let x = g.variable(Tensor::from_f64([3], &[1.0, -2.0, 3.0]));
//! let loss = (x * x).sum();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.of(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```
//!
//! Everything is generic over [`Real`] so the same network code runs in
//! `f32` for training and in `f64` for finite-difference verification.

mod error;
pub mod gradcheck;
mod graph;
pub mod ops;
pub mod optim;
mod param;
mod real;
mod tensor;

pub use error::AutodiffError;
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::conv::{conv_out_size, Padding};
pub use ops::reduce::softmax;
pub use optim::{Adam, AdamConfig};
pub use param::{kaiming_normal, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
