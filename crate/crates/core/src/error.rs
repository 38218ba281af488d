use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("graph contains a cycle through node `{0}`")]
    CycleDetected(String),
    #[error("protected attribute `{0}` must not have parents")]
    ProtectedHasParents(String),
    #[error("edge references unknown node `{0}`")]
    UnknownNodeInEdge(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("malformed edge `{0}`, expected `parent->child`")]
    MalformedEdge(String),
    #[error("graph has no nodes")]
    EmptyGraph,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sample is missing a value for `{0}`")]
    MissingValue(String),
    #[error("invalid basis: {0}")]
    InvalidBasis(String),

    #[error("normal equations are singular")]
    SingularNormalEquations,
    #[error("data contains non-finite values")]
    NonFiniteData,
    #[error("matrix is not positive definite even after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },
    #[error("input matrix is not symmetric (max asymmetry {0:e})")]
    NonSymmetricInput(f64),
    #[error("invalid correlation parameters: {0}")]
    InvalidCorrelation(String),

    #[error("grid tool needs exactly two features, graph has {0}")]
    NotBivariate(usize),
    #[error("optimizer diverged at iteration {iteration}")]
    DivergenceDetected { iteration: usize, trace: Vec<f64> },
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),

    #[error("every cross-validation candidate failed")]
    AllCandidatesFailed,

    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("protected column `{column}` has non-binary value {value} on row {row}")]
    NonBinaryProtected { column: String, row: usize, value: f64 },
    #[error("no rows left after dropping missing values")]
    EmptyAfterFiltering,
    #[error("could not parse `{value}` in column `{column}` on row {row}")]
    Parse { column: String, row: usize, value: String },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
