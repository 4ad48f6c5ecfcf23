use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("point ({x}, {y}) lies outside the mesh")]
    OutOfDomain { x: f64, y: f64 },

    #[error("triangle {index} has zero or negative area ({area:e})")]
    DegenerateElement { index: usize, area: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    Indefinite { pivot: usize, value: f64 },

    #[error("operator symbol is singular at |k| = {k_norm} (det = {det:e})")]
    SingularSymbol { k_norm: f64, det: f64 },

    #[error("spectrum requires a triangular system but b12 = {0}")]
    NotTriangular(f64),

    #[error("parameter matching requires equal scales: {0}")]
    MatchingRegime(String),

    #[error("inconsistent matched parameters: {0}")]
    InconsistentParameters(String),

    #[error("covariance model is not valid: {0}")]
    InvalidModel(String),

    #[error("conditioning failed: {0}")]
    Conditioning(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by malformed input or configuration, as
    /// opposed to numerical breakdowns.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidRegion(_)
                | Error::InvalidParameter(_)
                | Error::Shape(_)
                | Error::Parse { .. }
                | Error::Schema(_)
                | Error::Config(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Csv(_)
                | Error::OutOfDomain { .. }
                | Error::InsufficientData(_)
                | Error::IndexOutOfRange { .. }
                | Error::NotTriangular(_)
                | Error::MatchingRegime(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
