use std::path::PathBuf;

/// Every failure the engine can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid grid range: lo ({lo}) must be below hi ({hi})")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("invalid grid size {0}: at least one interval is required")]
    InvalidGridSize(usize),

    #[error("spline degree {degree} exceeds the supported maximum {max}")]
    DegreeTooLarge { degree: usize, max: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("least-squares normal matrix is singular")]
    SingularSystem,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("gradient tape is empty")]
    EmptyTape,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("max-pool needs even spatial dims, got {h}x{w}")]
    OddDimension { h: usize, w: usize },

    #[error("{model}: {pools} pooling stages need H and W divisible by {divisor}, got {h}x{w}")]
    Divisibility {
        model: String,
        pools: u32,
        divisor: usize,
        h: usize,
        w: usize,
    },

    #[error("malformed PGM {path}: {reason}")]
    MalformedPgm { path: String, reason: String },

    #[error("class directory {0} holds no .pgm images")]
    EmptyClass(PathBuf),

    #[error("class {class} has {count} samples, at least {min} required")]
    TooFewSamples { class: usize, count: usize, min: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used for machine-parsable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidRange { .. } => "invalid_range",
            Error::InvalidGridSize(_) => "invalid_size",
            Error::DegreeTooLarge { .. } => "invalid_size",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::SingularSystem => "singular_system",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::EmptyTape => "empty_tape",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::OddDimension { .. } => "odd_dimension",
            Error::Divisibility { .. } => "divisibility",
            Error::MalformedPgm { .. } => "malformed_pgm",
            Error::EmptyClass(_) => "empty_class",
            Error::TooFewSamples { .. } => "too_few_samples",
            Error::EmptyDataset => "empty_dataset",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
