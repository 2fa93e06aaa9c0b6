use std::fmt;

use dff_core::adapter::AdapterError;
use dff_core::formats::FormatError;
use dff_core::heatmap::HeatmapError;
use dff_core::nmf::NmfError;
use dff_core::refine::RefineError;
use dff_core::segmentation::SegmentationError;
use dff_core::tensor::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Extract,
    Factorize,
    Refine,
    Segment,
    EvalParts,
    EvalCorloc,
    Render,
    Sweep,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Extract => "extract",
            Stage::Factorize => "factorize",
            Stage::Refine => "refine",
            Stage::Segment => "segment",
            Stage::EvalParts => "eval-parts",
            Stage::EvalCorloc => "eval-corloc",
            Stage::Render => "render",
            Stage::Sweep => "sweep",
        })
    }
}

/// Failure category, which decides the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage}: {message}")]
pub struct CliError {
    pub stage: Stage,
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(stage: Stage, kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            stage,
            kind,
            message: message.into(),
        }
    }

    pub fn config(stage: Stage, message: impl Into<String>) -> Self {
        Self::new(stage, ErrorKind::Config, message)
    }

    pub fn data(stage: Stage, message: impl Into<String>) -> Self {
        Self::new(stage, ErrorKind::Data, message)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

/// Attaches a stage to a library error, classifying it on the way.
pub trait StageContext<T> {
    fn stage(self, stage: Stage) -> Result<T, CliError>;
}

pub trait Classify: fmt::Display {
    fn kind(&self) -> ErrorKind;
}

impl<T, E: Classify> StageContext<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(stage, e.kind(), e.to_string()))
    }
}

impl Classify for NmfError {
    fn kind(&self) -> ErrorKind {
        match self {
            NmfError::RankTooLarge { .. } | NmfError::InvalidConfig(_) => ErrorKind::Config,
            NmfError::ShapeMismatch(_) => ErrorKind::Data,
            NmfError::DegenerateInput | NmfError::NumericFailure(_) => ErrorKind::Numeric,
        }
    }
}

impl Classify for AdapterError {
    fn kind(&self) -> ErrorKind {
        match self {
            AdapterError::LayerNotFound(_) | AdapterError::PreActivationTap { .. } => ErrorKind::Config,
            AdapterError::Inference(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for RefineError {
    fn kind(&self) -> ErrorKind {
        match self {
            RefineError::InvalidConfig(_) => ErrorKind::Config,
            RefineError::SizeMismatch(_) => ErrorKind::Data,
        }
    }
}

impl Classify for SegmentationError {
    fn kind(&self) -> ErrorKind {
        match self {
            SegmentationError::InvalidPercentile(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {
        $(impl Classify for $t {
            fn kind(&self) -> ErrorKind {
                ErrorKind::Data
            }
        })*
    };
}

data_errors!(FormatError, HeatmapError, TensorError, std::io::Error, image::ImageError);
