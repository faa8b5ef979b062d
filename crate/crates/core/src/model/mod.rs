//! Core data types and their file formats.

mod candidates;
mod descriptors;
mod ground_truth;
mod metadata;
mod registry;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use candidates::{
    for_each_candidate, format_score, global_order, load_candidates, read_candidates, save_candidates,
    write_candidates, Candidate, CandidateList, CANDIDATES_HEADER,
};
pub use descriptors::{
    encoded_len, import_descriptors_csv, load_descriptors, load_descriptors_with, read_descriptors,
    save_descriptors, write_descriptors, DescriptorSet, DEFAULT_MAX_DIM,
};
pub use ground_truth::{load_ground_truth, read_ground_truth, save_ground_truth, write_ground_truth, GroundTruth};
pub use metadata::{
    intensity_from_percent, load_metadata, load_metadata_with, read_metadata, save_metadata, validate_metadata,
    write_metadata, EditMode, QueryMetadata, Source, TransformationStep, MAX_STEPS,
};
pub use registry::{Registry, TransformClass, TransformInfo};

/// Per-transformation penalties of the additive AP model, with fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyModel {
    pub penalties: BTreeMap<String, f64>,
    pub residual_norm: f64,
    pub rank_deficient: bool,
    pub regularization: f64,
}
