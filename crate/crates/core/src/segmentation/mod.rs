//! Percentile binarization, part coverage and association, dataset-wide IoU,
//! and box localization with CorLoc.

mod components;
mod localization;
mod masks;

pub use components::{connected_components, largest_component_bbox, Components};
pub use localization::{box_iou, boxes_match, corloc, BBox};
pub use masks::{
    associate_parts, binarize_factor, coverage, dataset_iou, nearest_rank, union_of_parts,
    BinaryMaskSet, PartAnnotation,
};

/// A binary grid indexed `[y, x]`.
pub type Mask = ndarray::Array2<bool>;

pub const DEFAULT_PERCENTILE: f64 = 75.0;
pub const DEFAULT_COVERAGE_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SegmentationError {
    #[error("EmptySet: no heat-map values to threshold")]
    EmptySet,
    #[error("InvalidPercentile: {0} is outside (0, 100)")]
    InvalidPercentile(f64),
    #[error("EmptyPart: part {0} has no pixels in the set")]
    EmptyPart(String),
    #[error("EmptyUnion: prediction and ground truth are both empty")]
    EmptyUnion,
    #[error("NoForeground: mask has no foreground pixels")]
    NoForeground,
    #[error("MissingGroundTruth: no ground-truth box for image {0}")]
    MissingGroundTruth(String),
    #[error("NoPredictions: no predicted boxes")]
    NoPredictions,
    #[error("InvalidBox: {0:?}")]
    InvalidBox([u32; 4]),
    #[error("SizeMismatch: {0}")]
    SizeMismatch(String),
}
