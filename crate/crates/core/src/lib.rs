//! Evaluation toolkit for image copy detection: exact nearest-neighbour
//! search over float descriptors, ranking metrics, score normalization,
//! per-transformation penalty analysis and a synthetic benchmark generator.

pub mod error;
pub mod knn;
pub mod metrics;
pub mod model;
pub mod normalize;
pub mod penalty;
pub mod report;
pub mod synth;

pub use error::{Error, RecordIssue, Result};
