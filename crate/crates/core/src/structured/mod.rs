//! Kronecker-structured GPs on grids with missing observations.

mod grid;
mod kron;
mod texture;

pub use grid::{GridGp, GridSpec};
pub use kron::{
    axis_eigenvalues, complete_grid, kron_dense, kron_eigenvalues, kron_matvec, logdet_approx, pcg_solve,
    solve_completed_grid, CgConfig, CgSolution,
};
pub use texture::{
    center_hole, parse_pgm, read_pgm, synthetic_texture, texture_extrapolate, write_pgm, AxisKernel, GrayImage,
    SyntheticTexture, TextureConfig, TextureResult,
};
