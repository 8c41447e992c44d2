//! Exact Gaussian-process regression on top of a kernel network.

pub mod check;
pub mod linalg;
pub mod model;

pub use check::{gradcheck, GradCheck};
pub use linalg::{lower_inverse, SpdFactor};
pub use model::{FittedPosterior, GpModel, Posterior, Standardizer, DEFAULT_NOISE_VARIANCE, MODEL_SCHEMA};
