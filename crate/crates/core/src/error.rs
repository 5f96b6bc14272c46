use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("value {value} outside the distribution support [{lower}, {upper}]")]
    Domain { value: f64, lower: f64, upper: f64 },
    #[error("degenerate GPD fit: {0}")]
    DegenerateFit(String),
    #[error("positivity violation at index {index}: propensity {value}")]
    Positivity { index: usize, value: f64 },
    #[error("empty treatment group: {0}")]
    EmptyGroup(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("data consistency error at row {row}: {message}")]
    Consistency { row: usize, message: String },
    #[error("degenerate denominator: {0}")]
    DegenerateDenominator(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidInput(format!(
            "{what}: non-finite entry {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}
