use thiserror::Error;

/// Errors produced by the attack pipeline and its file formats.
#[derive(Error, Debug)]
pub enum HaamError {
    #[error("invalid dimensions: {0}")]
    InvalidDimension(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("field overflow: harmonic evaluation produced a non-finite value")]
    FieldOverflow,

    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    TrainingDiverged { epoch: usize, batch: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("IDX magic mismatch in {path}: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    #[error("IDX payload truncated in {path}: expected {expected} bytes, found {found}")]
    IdxTruncated {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("netpbm parse error: {0}")]
    NetpbmParse(String),

    #[error("checkpoint parse error: {0}")]
    CheckpointParse(String),

    #[error("manifest parse error: {0}")]
    ManifestParse(String),

    #[error("run integrity error: manifest references missing image {id}")]
    MissingImage { id: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HaamError>;
