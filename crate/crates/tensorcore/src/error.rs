use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("layer {layer} ({kind}): expected input shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        layer: usize,
        kind: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameter `{name}`: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("cache is stale: recorded for parameter generation {cached}, parameters are at {current}")]
    StaleCache { cached: u64, current: u64 },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid layer stack: {0}")]
    InvalidSpec(String),
    #[error("malformed parameter record: {0}")]
    Decode(String),
}
