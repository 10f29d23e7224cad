use thiserror::Error;

/// Errors raised across data ingestion, fitting and prediction.
#[derive(Debug, Error)]
pub enum SpbError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("malformed row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("duplicate location ({lon}, {lat}) at row {row}")]
    DuplicateLocation { row: usize, lon: f64, lat: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: String },

    #[error("singular system ({context})")]
    Singular { context: String },

    #[error("location ({lon}, {lat}) lies outside the mesh hull")]
    OutsideMesh { lon: f64, lat: f64 },

    #[error(
        "{method} needs a dense {n}x{n} covariance; refusing n > {limit}. \
         Use one of the scalable predictors instead (EDW, FRK, MPP, SPD, LTK)"
    )]
    TooLarge { method: String, n: usize, limit: usize },

    #[error("MCMC chain too short: {available} draws, need at least {required}")]
    ChainTooShort { available: usize, required: usize },

    #[error("no pairs found at lag {lag} (tolerance {tol})")]
    NoPairsAtLag { lag: f64, tol: f64 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SpbError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(SpbError::InvalidInput(msg.into()))
}
