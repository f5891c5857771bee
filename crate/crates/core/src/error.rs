use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {file} at line {line}: {msg}")]
    Parse { file: String, line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("index build error: {} item(s) without a semantic id: {:?}", .0.len(), .0)]
    MissingSemId(Vec<u64>),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("numeric error at layer {layer}: {msg}")]
    Numeric { layer: usize, msg: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
