//! Network specification, parameter storage, evaluation and compilation.

pub mod graph;
pub mod presets;
pub mod pwp;
pub mod spec;
pub mod store;

pub use graph::{backward, forward_gram, forward_matrix, kernel_diag, kernel_gram, kernel_matrix, ForwardPass};
pub use presets::{preset, InitContext, Preset};
pub use pwp::{compile_pwp, example1_kernel, Example1Target, PwpExpr, PwpTerm};
pub use spec::{Activation, LayerSpec, LinearSpec, NetworkSpec, PrimitiveSlot, SPEC_SCHEMA};
pub use store::{NodeRef, ParameterStore, Segment};
