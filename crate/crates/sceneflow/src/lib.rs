//! Unsupervised scene-flow estimation for RGB-D point clouds.
//!
//! The library unprojects depth maps to point clouds, evaluates the four
//! unsupervised losses (depth consistency, dynamic-static consistency,
//! Chamfer, Laplacian regularization) with analytic gradients, and estimates
//! per-point 3D flow by direct coarse-to-fine minimization of the combined
//! objective. A point-to-point ICP baseline, evaluation metrics, a synthetic
//! RGB-D scene generator, and file formats for the CLI round out the crate.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod icp;
pub mod io;
pub mod losses;
pub mod neighbors;
pub mod optimizer;
pub mod preprocess;
pub mod synth;

pub use error::{Error, Result};
