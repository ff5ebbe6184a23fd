//! Non-ergodic ground-motion modelling of Fourier amplitude residuals.
//!
//! Spatially varying source and site constants, cell-specific anelastic
//! attenuation, hierarchical Bayesian fitting per frequency, closed-form
//! prediction at new locations, inter-frequency correlation and
//! earthquake-grouped cross-validation.

pub mod aleatory;
pub mod cells;
pub mod data;
pub mod error;
pub mod geo;
pub mod ifcorr;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod predict;
pub mod rng;
pub mod validate;

pub use error::{Error, Result};
