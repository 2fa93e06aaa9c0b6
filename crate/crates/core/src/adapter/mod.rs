//! Getting activations into the pipeline: running an ONNX network to a tap,
//! or reading previously dumped DFFA files listed in a batch manifest.

mod container;
mod manifest;
mod onnx;
pub mod tiny_net;

pub use container::{decode_activations, encode_activations, load_activations, save_activations};
pub use manifest::{BatchManifest, ManifestEntry};
pub use onnx::{ActivationExtractor, ModelSpec, IMAGENET_MEAN, IMAGENET_STD};

use std::path::Path;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum AdapterError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("BadMagic: not a DFFA activation file")]
    BadMagic,
    #[error("VersionUnsupported: container version {0}")]
    VersionUnsupported(u16),
    #[error("FormatUnsupported: {0}")]
    FormatUnsupported(String),
    #[error("DimMismatch: header expects {expected} values, payload has {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("ModelLoadError: {0}")]
    ModelLoad(String),
    #[error("LayerNotFound: no node or value named {0:?}")]
    LayerNotFound(String),
    #[error("NonNegativityViolated: tap {layer:?} is not post-activation ({source})")]
    PreActivationTap {
        layer: String,
        #[source]
        source: TensorError,
    },
    #[error("TapShape: tap {layer:?} has shape {shape:?}, expected (1, c, h, w)")]
    TapShape { layer: String, shape: Vec<usize> },
    #[error("InferenceError: {0}")]
    Inference(String),
    #[error("ImageError: {path}: {message}")]
    Image { path: String, message: String },
    #[error("ManifestError: {0}")]
    Manifest(String),
}

impl AdapterError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        AdapterError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Decodes an image file as 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<image::RgbImage, AdapterError> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| AdapterError::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}
