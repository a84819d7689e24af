use thiserror::Error;

/// Library-wide error type. Variants map onto the failure classes the
/// individual modules document (parameter validation, data problems,
/// numeric trouble, alignment of panels, ...).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameter value at construction or call time.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Malformed input data (non-finite value, empty input, bad shape).
    #[error("bad data: {0}")]
    Data(String),

    /// Model fitting could not proceed.
    #[error("fit error: {0}")]
    Fit(String),

    /// Feature-count or vector-length mismatch.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Design matrix is rank deficient; `column` is the first column that is
    /// linearly dependent on its predecessors.
    #[error("singular design matrix: column {column} ({name}) is collinear with earlier columns")]
    Singular { column: usize, name: String },

    /// Numeric procedure failed to converge or produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Panels that must share observations do not line up.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Not enough history to honor the requested window.
    #[error("coverage error: {0}")]
    Coverage(String),

    /// A stratified partition cannot be built.
    #[error("partition error: {0}")]
    Partition(String),

    /// A test statistic degenerates (e.g. identical forecasts in a DM test).
    #[error("degenerate test: {0}")]
    Degenerate(String),

    /// Synthetic-oracle information (latent shocks) is missing.
    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),

    /// Index or stage argument out of range.
    #[error("out of range: {0}")]
    Range(String),

    /// The no-lookahead audit found a violation.
    #[error("lookahead audit failed: {0}")]
    Audit(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
