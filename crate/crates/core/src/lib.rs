//! Deep feature factorization: non-negative matrix factorization of CNN
//! activations pooled over an image set, turned into per-image heat maps,
//! refined against the image, and scored as co-segmentation and
//! co-localization.

pub mod adapter;
pub mod formats;
pub mod heatmap;
pub mod nmf;
pub mod refine;
pub mod segmentation;
pub mod tensor;

pub use heatmap::HeatMapStack;
pub use nmf::{Factorization, InitMethod, NmfConfig};
pub use refine::RefineConfig;
pub use segmentation::{BBox, BinaryMaskSet, PartAnnotation};
pub use tensor::{ActivationTensor, BatchLayout, FeatureMatrix};
