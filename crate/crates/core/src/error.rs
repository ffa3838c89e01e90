use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty vector")]
    EmptyVector,

    #[error("nonpositive scale: {0}")]
    NonpositiveScale(f64),

    #[error("degenerate vector (norm {0:e})")]
    DegenerateVector(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),

    #[error("insufficient samples in class {class}: requested {requested}, available {available}")]
    InsufficientSamples {
        class: usize,
        requested: usize,
        available: usize,
    },

    #[error("calibration collapse")]
    CalibrationCollapse,

    #[error("degenerate contrastive batch: {0}")]
    DegenerateContrastiveBatch(&'static str),

    #[error("stale pseudo cache: no entry for sample {0}")]
    StalePseudoCache(u64),

    #[error("non-normalized key (norm {0})")]
    NonNormalizedKey(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with all context layers stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn with_context<F: FnOnce() -> String>(self, f: F) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn with_context<F: FnOnce() -> String>(self, f: F) -> Result<T> {
        self.map_err(|e| e.context(f()))
    }
}
