//! Regularized optimal transport between noisy density snapshots.
//!
//! A velocity series and a denoised density trajectory are recovered by
//! minimizing a kinetic transport energy plus a weighted data-misfit term,
//! with densities constrained to follow the advection-diffusion equation.
//! The recovered flow is then traced into streamlines, accumulated into
//! per-voxel pathway counts and clustered with QuickBundles.
//!
//! Module map:
//! - [`grid`]: cell-centered grids, fields, diffusion and deposit operators
//! - [`forward`]: the operator-split forward model and its linearization
//! - [`solver`]: objective, adjoint gradient, Gauss-Newton solve, metrics
//! - [`flowlines`]: seeding, RK4 streamlines, pathway maps
//! - [`bundles`]: track resampling, MDF distance, QuickBundles
//! - [`synth`]: synthetic ground truth, noise, finite-difference oracle
//! - [`io`]: NIfTI-1 volumes, velocity series, JSON/CSV artifacts, config

// `!(x > 0.0)` is used on purpose so NaN is rejected too; index loops over
// axes read more clearly than zipped iterators here.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bundles;
pub mod error;
pub mod flowlines;
pub mod forward;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod solver;
pub mod synth;

pub use error::{Error, NiftiError, Result};
pub use forward::{DensitySeries, ForwardModel, TimeGrid, VelocitySeries};
pub use grid::{CellGrid, ScalarField, VectorField};
pub use linalg::SparseOperator;
