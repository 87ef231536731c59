use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error category, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("class directory for `{0}` is missing")]
    MissingClass(String),

    #[error("class `{0}` contains no decodable images")]
    EmptyClass(String),

    #[error("class `{class}` has {available} samples but {required} non-empty splits were requested")]
    Stratification {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("label index {index} is out of range for {class_count} classes")]
    LabelRange { index: usize, class_count: usize },

    #[error("unknown archetype `{0}`; expected one of nsc_like, neuron_like, astrocyte_like, oligodendrocyte_like")]
    Archetype(String),

    #[error("invalid cell geometry: {0}")]
    Geometry(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("pretrained weights unusable at {path} (expected sha256 {expected}): {reason}")]
    WeightArtifact {
        path: PathBuf,
        expected: String,
        reason: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values: {0}")]
    Numeric(String),

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("class `{0}` has no positive or no negative samples")]
    DegenerateClass(String),

    #[error("unknown layer `{requested}`; valid layers: {valid}")]
    LayerNotFound { requested: String, valid: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Config(_) | Archetype(_) | Compatibility(_) | LayerNotFound { .. } => ErrorKind::Config,
            Numeric(_) | Divergence { .. } => ErrorKind::Numeric,
            Io { .. } | Csv { .. } | WeightArtifact { .. } => ErrorKind::Io,
            MissingClass(_)
            | EmptyClass(_)
            | Stratification { .. }
            | InvalidImage(_)
            | LabelRange { .. }
            | Geometry(_)
            | Shape(_)
            | CorruptCheckpoint { .. }
            | Split(_)
            | DegenerateClass(_)
            | NotFound(_)
            | Image { .. }
            | Json(_) => ErrorKind::Data,
        }
    }

    /// Module-qualified error code, e.g. `training::DivergenceError`.
    pub fn code(&self) -> &'static str {
        use Error::*;
        match self {
            MissingClass(_) => "dataset::MissingClassError",
            EmptyClass(_) => "dataset::EmptyClassError",
            Stratification { .. } => "dataset::StratificationError",
            InvalidImage(_) => "dataset::InvalidImageError",
            LabelRange { .. } => "dataset::LabelRangeError",
            Archetype(_) => "synth::ArchetypeError",
            Geometry(_) => "synth::GeometryError",
            Config(_) => "config::ConfigError",
            WeightArtifact { .. } => "model::WeightArtifactError",
            Shape(_) => "model::ShapeError",
            Numeric(_) => "model::NumericError",
            CorruptCheckpoint { .. } => "model::CorruptCheckpointError",
            Compatibility(_) => "model::CompatibilityError",
            Split(_) => "training::SplitError",
            Divergence { .. } => "training::DivergenceError",
            DegenerateClass(_) => "evaluation::DegenerateClassError",
            LayerNotFound { .. } => "interpretability::LayerNotFoundError",
            NotFound(_) => "cli::NotFoundError",
            Io { .. } => "io::IoError",
            Image { .. } => "io::ImageError",
            Csv { .. } => "io::CsvError",
            Json(_) => "io::DocumentError",
        }
    }
}
