use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed audio file: {0}")]
    Format(String),
    #[error("unsupported audio encoding: {0}")]
    Unsupported(String),
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("invalid speaker spec: {0}")]
    Spec(String),
    #[error("source {0} has zero RMS")]
    DegenerateSource(usize),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("source {0} has no active time-frequency bins")]
    DegenerateAttractor(usize),
    #[error("clustering error: {0}")]
    Clustering(String),
    #[error("out-of-order chunk: expected frame {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Autodiff(#[from] dasep_autodiff::AutodiffError),
}
