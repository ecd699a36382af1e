//! Tampering localization for scientific images via noise inconsistencies.

pub mod classifier;
pub mod error;
pub mod eval;
pub mod features;
pub mod img;
pub mod ocsvm;
pub mod pipeline;
pub mod residuals;
pub mod synth;

pub use error::{Error, Result};
