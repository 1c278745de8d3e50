//! Dual-latent image autoencoder.
//!
//! A [`networks::DualVae`] separates an image into a geometry latent (a grid
//! of codebook tokens, or encoder features for the `ReDualVae` variant) and a
//! Gaussian colour latent. [`pipeline`] trains it, fits an autoregressive
//! [`prior::Prior`] over token grids and runs the generation procedures.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod latents;
pub mod layers;
pub mod networks;
pub mod objective;
pub mod pipeline;
pub mod prior;
pub mod theory;

pub use checkpoint::{Bundle, Checkpoint};
pub use config::{TrainConfig, Variant};
pub use error::{Error, Result};
pub use networks::DualVae;
pub use prior::Prior;
