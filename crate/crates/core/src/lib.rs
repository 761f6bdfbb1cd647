//! gradkd: a desk-scale laboratory for gradient-aligned knowledge
//! distillation on small transformer text classifiers.
//!
//! The crate builds everything from first principles on f64: a reverse-mode
//! autodiff tape with differentiable gradients, a small transformer encoder,
//! the distillation loss family (soft targets, hidden-state alignment, and
//! gradient alignment), a verification suite for the dropout gradient bias
//! identity, student/teacher loyalty metrics, and an experiment harness with
//! deterministic synthetic data.

pub mod autodiff;
pub mod data;
pub mod dropout_bias;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod parallel;

pub use error::{Error, Result};
