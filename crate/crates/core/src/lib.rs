//! Graph-interpolating output activation for small neural nets.
//!
//! The crate replaces a softmax output layer with a weighted nonlocal
//! Laplacian (WNLL) label interpolation over a kNN feature graph, and ships
//! everything needed to exercise that idea at desk scale: dataset plumbing,
//! graph construction, sparse solvers, a minimal reverse-mode autodiff net
//! with a buffer block and dual (linear / interpolating) heads, alternating
//! and PGD-adversarial training, gradient-based attacks with surrogate
//! gradients for the interpolating head, and a robust-evaluation harness.

// index-based loops mirror the matrix math; negated comparisons keep NaN
// rejection explicit in validation code
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod graph;
pub mod interpolate;
pub mod matrix;
pub mod net;
pub mod pca;
pub mod rng;
pub mod robust;
pub mod sparse;
pub mod train;

pub use error::{Error, Result};
pub use matrix::{FeatureMatrix, LabelMatrix, Matrix};
