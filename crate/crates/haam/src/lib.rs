//! Edge-free adversarial perturbations from parametric harmonic functions.
//!
//! The library builds perturbation fields as the real or imaginary parts of
//! analytic complex functions, evaluated over an affinely transformed image
//! coordinate grid, and optimizes both the function parameters and the
//! transform against a differentiable classifier. Because the fields are
//! harmonic they carry no edges of their own, which keeps the structural
//! distortion of the attacked image low at a given perturbation budget.
//!
//! Module map:
//! - [`analytic`]: analytic bases, harmonic field models, harmonicity checks
//! - [`coords`]: normalized pixel grids and the learnable affine transform
//! - [`perturbation`]: field normalization and image composition
//! - [`classifier`]: small built-in differentiable models and training
//! - [`dataset`]: the synthetic glyph dataset used by the test tooling
//! - [`attack`]: the iterative attack loop and batch driver
//! - [`metrics`]: SSIM, edge SSIM, perturbation-to-noise ratio, transfer
//! - [`io`]: IDX, netpbm, checkpoint and run-manifest persistence

pub mod analytic;
pub mod attack;
pub mod classifier;
pub mod coords;
pub mod dataset;
pub mod error;
pub mod io;
pub mod metrics;
pub mod perturbation;

pub use error::{HaamError, Result};
