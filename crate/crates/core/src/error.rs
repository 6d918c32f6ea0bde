use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("matrix error: {0}")]
    Matrix(String),
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("checkpoint error at byte offset {offset}: {msg}")]
    Checkpoint { offset: u64, msg: String },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("flow file error: {0}")]
    FlowFile(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI on stderr.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "configuration error",
            Error::Dimension(_) => "dimension error",
            Error::Range(_) => "range error",
            Error::Numeric(_) => "numeric error",
            Error::Generation(_) => "generation error",
            Error::Matrix(_) => "matrix error",
            Error::Ingestion(_) => "ingestion error",
            Error::Checkpoint { .. } => "checkpoint error",
            Error::ConfigMismatch(_) => "config mismatch",
            Error::Contract(_) => "contract error",
            Error::Metric(_) => "metric error",
            Error::Training(_) => "training error",
            Error::FlowFile(_) => "flow file error",
            Error::Io(_) => "io error",
            Error::Image(_) => "image error",
            Error::Tensor(_) => "tensor error",
        }
    }
}
