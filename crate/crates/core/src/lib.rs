//! Differentiable Pareto-smoothed weighting (DPSW) for conditional average
//! treatment effect estimation.
//!
//! The crate is organised bottom-up:
//!
//! - [`softrank`]: hard and differentiable (permutahedron projection) ranks.
//! - [`gpd`]: generalized Pareto primitives and probability-weighted-moment fits.
//! - [`smoothing`]: IPW weights, truncation, self-normalization, hard and
//!   differentiable Pareto smoothing.
//! - [`nnet`]: a small feed-forward network with exact gradients, kernel MMD
//!   and Adam.
//! - [`estimator`]: the three-encoder model, its objectives and the
//!   alternating training loop.
//! - [`datagen`]: synthetic benchmark generation, splits and CSV I/O.
//! - [`eval`]: PEHE, encoder attribution and the multi-seed experiment harness.

pub mod datagen;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod gpd;
pub mod nnet;
pub mod smoothing;
pub mod softrank;

pub use error::{Error, Result};
