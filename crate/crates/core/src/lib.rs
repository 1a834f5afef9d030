//! Masked stereo transformer training library.
//!
//! Self-contained f64 implementation of a masked-image-modeling stereo
//! disparity network: a tape-based autodiff engine, the student/teacher
//! transformer, losses, synthetic data generation, disparity file I/O,
//! evaluation metrics, attention analysis, and the training loop.

pub mod analysis;
pub mod data;
pub mod distill;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
