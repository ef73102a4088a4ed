//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // tensor
    #[error("row {0} has exactly zero norm (strict normalization)")]
    ExactZeroRow(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite value at index {0}")]
    NonFiniteValue(usize),
    #[error("covariance is degenerate: top-2 eigenvalues indistinguishable from 0")]
    DegenerateCovariance,

    // io
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("duplicate category id {0}")]
    DuplicateCategoryId(u32),
    #[error("category ids are not contiguous from 0 (missing {0})")]
    NonContiguousCategoryIds(u32),
    #[error("category {0} has an empty reference set")]
    EmptyReferenceSet(u32),
    #[error("reference row index {row} out of range (matrix has {rows} rows)")]
    RowIndexOutOfRange { row: usize, rows: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed input at {path}:{line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },

    // prototypes
    #[error("reference count {0} outside the sigma table domain [1,100]")]
    OutOfRange(usize),
    #[error("sigma table does not cover [1,100] without gaps or overlaps")]
    BadSigmaTable,
    #[error("no reference set for category {0}")]
    MissingReferences(u32),
    #[error("row count mismatch: {0}")]
    RowCountMismatch(String),

    // classification
    #[error("supervised ensemble requires conventional logits")]
    MissingConventional,
    #[error("logit block shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("k = {k} outside [1, {max}]")]
    KOutOfRange { k: usize, max: usize },

    // training
    #[error("label {label} out of range for {categories} categories")]
    LabelOutOfRange { label: u32, categories: usize },

    // synthesis
    #[error("cannot place {categories} directions under cosine cap {cap} in dimension {dim}")]
    UnsatisfiableSeparation {
        categories: usize,
        dim: usize,
        cap: f32,
    },

    // evaluation
    #[error("silhouette requires at least 2 clusters")]
    SingleCluster,

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code per CLI contract: 1 usage, 2 data validation, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::KOutOfRange { .. } | Error::InvalidConfig(_) => 1,
            Error::ExactZeroRow(_)
            | Error::NonFiniteValue(_)
            | Error::DegenerateCovariance
            | Error::UnsatisfiableSeparation { .. } => 3,
            _ => 2,
        }
    }
}
