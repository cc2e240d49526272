//! Low-rank linear layers with latent crossing, reverse-mode gradients,
//! training utilities and cost accounting.

pub mod accounting;
pub mod error;
pub mod lax;
pub mod layers;
pub mod nets;
pub mod numerics;
pub mod training;

pub use error::{LaxError, Result};
