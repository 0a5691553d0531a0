use std::path::PathBuf;

/// Every failure the engine can report. Variants map one-to-one onto the
/// documented error conditions of each operation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate rotation: quaternion norm {norm:e} for gaussian {id}")]
    DegenerateRotation { id: u64, norm: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("mask misaligned with cloud: {0}")]
    MaskMisaligned(String),
    #[error("invalid temperature {0}; must be > 0")]
    InvalidTemperature(f64),
    #[error("selector needs at least one segmentation target")]
    NoTargets,
    #[error("index {index} out of range for cloud of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("empty region")]
    EmptyRegion,
    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    ImageTooSmall { width: usize, height: usize, window: usize },
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("request timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("instruction needs an LLM backend to ground: {0:?}")]
    NeedsLlm(String),
    #[error("unclassifiable clause: {0:?}")]
    UnclassifiableClause(String),
    #[error("cyclic dependency between tasks: {0:?}")]
    CyclicDependency(Vec<String>),
    #[error("op log replay diverged: {0}")]
    ReplayMismatch(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("unsupported format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line surface: 2 for configuration
    /// and input problems, 3 for numeric failures, 4 for remote services.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. }
            | Error::DegenerateRotation { .. }
            | Error::InvalidTemperature(_)
            | Error::ReplayMismatch(_) => 3,
            Error::ServiceUnavailable(_) | Error::MalformedResponse(_) | Error::Timeout(_) => 4,
            _ => 2,
        }
    }

    /// Short machine-readable tag, used in the CLI's stderr JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateRotation { .. } => "DegenerateRotation",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::MaskMisaligned(_) => "MaskMisaligned",
            Error::InvalidTemperature(_) => "InvalidTemperature",
            Error::NoTargets => "NoTargets",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::InvalidCamera(_) => "InvalidCamera",
            Error::EmptyRegion => "EmptyRegion",
            Error::ImageTooSmall { .. } => "ImageTooSmall",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::ServiceUnavailable(_) => "ServiceUnavailable",
            Error::MalformedResponse(_) => "MalformedResponse",
            Error::Timeout(_) => "Timeout",
            Error::EmptyInstruction => "EmptyInstruction",
            Error::NeedsLlm(_) => "NeedsLLM",
            Error::UnclassifiableClause(_) => "UnclassifiableClause",
            Error::CyclicDependency(_) => "CyclicDependency",
            Error::ReplayMismatch(_) => "ReplayMismatch",
            Error::Config(_) => "ConfigError",
            Error::InvalidInput(_) => "InvalidInput",
            Error::Format { .. } => "FormatError",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "JsonError",
            Error::Image(_) => "ImageError",
        }
    }
}
