//! Differentiable primitives, attached to [`Var`](crate::Var) as methods.

pub mod conv;
mod elementwise;
mod linalg;
mod norm;
pub mod reduce;
mod shape;
