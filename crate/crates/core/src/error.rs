use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("unbalanced parentheses at char offset {offset}: {msg}")]
    Unbalanced { offset: usize, msg: String },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("structural error: {0}")]
    Structure(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFinite(String),

    #[error("instance too large for exhaustive enumeration: {0} paths")]
    TooLarge(f64),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
