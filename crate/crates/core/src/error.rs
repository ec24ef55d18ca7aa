pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("all loss positions masked")]
    EmptyLoss,

    #[error("missing gradient for {0}")]
    MissingGrad(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("context budget exceeded: {slots} slots > {budget}")]
    Budget { slots: usize, budget: usize },

    #[error("sequence of {len} tokens exceeds context {max}; chunk the input")]
    Chunking { len: usize, max: usize },

    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
