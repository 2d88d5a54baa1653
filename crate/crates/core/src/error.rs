use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("parameters lie outside the natural domain (precision matrix is not positive definite)")]
    OutsideDomain,

    #[error("covariance is not positive definite or violates the family structure: {0}")]
    InvalidMoments(String),

    #[error("invalid family: {0}")]
    InvalidFamily(String),

    #[error("evaluation stack is empty")]
    EmptyStack,

    #[error("all weights are zero")]
    ZeroWeights,

    #[error("length mismatch: {what} has {left} entries but {right} were expected")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error(
        "initial design is rank deficient ({points} evaluated points for a family of dimension {dim}); \
         n_initial_queries must exceed the family dimension"
    )]
    SingularInitialDesign { points: usize, dim: usize },

    #[error("invalid configuration field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("task {task}: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("run {run}: {source}")]
    Run {
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("risk of kind `{0}` cannot be serialized")]
    NotSerializable(&'static str),

    #[error("mismatched query grids between `{first}` and `{other}`")]
    MismatchedGrids { first: String, other: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::InvalidConfig { .. } | Error::Json(_) | Error::NotSerializable(_) => true,
            Error::Run { source, .. } | Error::Task { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}
