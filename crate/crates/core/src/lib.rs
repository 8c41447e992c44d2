//! Kernel networks for Gaussian-process regression, Kronecker-structured
//! inference on grids, and Bayesian optimization.

pub mod bayesopt;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod matrix;
pub mod nkn;
pub mod points;
pub mod primitives;
pub mod structured;
pub mod train;

pub use error::{NknError, Result};
pub use matrix::KernelValueMatrix;
pub use nkn::{
    backward, compile_pwp, forward_gram, forward_matrix, kernel_diag, kernel_matrix, preset,
    Activation, ForwardPass, InitContext, LayerSpec, LinearSpec, NetworkSpec, NodeRef,
    ParameterStore, Preset, PrimitiveSlot, PwpExpr, PwpTerm,
};
pub use points::Points;
pub use primitives::{Dims, Hyper, PrimitiveKind, PrimitiveTag};
pub use gp::{GpModel, Posterior, Standardizer};
pub use train::{fit, TrainConfig};
