//! Cross-market recommendation: market-unaware and market-aware latent factor
//! models, MAML/FOREC meta-learning baselines, leave-one-out data handling and
//! ranking evaluation.
//!
//! The numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the experiment tooling.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod nn;
pub mod scalar;
pub mod seeding;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model64 = models::Model<f64>;
pub type Model32 = models::Model<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type Gradients64 = nn::Gradients<f64>;
pub type AdamState64 = nn::AdamState<f64>;
