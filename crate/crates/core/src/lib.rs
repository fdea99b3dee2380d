//! Calibration toolkit for candidate-scored question answering.
//!
//! Reads prediction logs where every question carries a scored candidate set,
//! measures calibration, fits post-hoc calibrators (temperature scaling and a
//! boosted-tree confidence regressor), enumerates extractive span candidates
//! and aggregates paraphrased answers.

pub mod cli;
pub mod error;
pub mod gbdt;
pub mod metrics;
pub mod records;
pub mod scoring;
pub mod spans;
pub mod temp_scaling;
pub mod variants;

pub use error::{Error, Result};
pub use records::{Candidate, DatasetCollection, Example, Format, Split};
