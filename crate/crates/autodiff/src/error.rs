use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("function is not deterministic: two forward passes gave {first} and {second}")]
    NonDeterministicFunction { first: f64, second: f64 },
    #[error("step count must be at least 1")]
    ZeroStep,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
