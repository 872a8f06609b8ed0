//! Desk-scale laboratory for transfer-based adversarial attacks.
//!
//! The crate trains small differentiable classifiers, crafts adversarial
//! examples with momentum sign-gradient attacks under a family of input
//! transformations (MIST, Admix, SIM, DIM, TIM and their compositions),
//! and measures how well those examples transfer between models. A
//! two-dimensional three-class experiment visualizes why mixing
//! information from other categories steers adversarial examples toward
//! the intersection of decision boundaries.
//!
//! Everything is seeded and deterministic: the same configuration always
//! reproduces the same weights, attacks, and reports.

pub mod attack;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod rng;
pub mod tape;
pub mod transforms;
pub mod tensor;
pub mod toy2d;

pub use error::{Error, Result};
pub use tensor::Tensor;
