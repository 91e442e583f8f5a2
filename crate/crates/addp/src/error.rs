use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),

    #[error("band unresolvable at this length/fs")]
    BandUnresolvable,

    #[error("undefined correlation: both sequences are constant")]
    UndefinedCorrelation,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("result matrix incomplete: missing entry p[{i}][{j}]")]
    MissingMatrixEntry { i: usize, j: usize },

    #[error("extrapolation requested: target time {0} outside source range")]
    Extrapolation(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown prototype id {0}")]
    UnknownPrototype(usize),

    #[error("empty training set for task {0}")]
    EmptyTrainingSet(String),

    #[error("prototype store is empty but method addp requires prototypes for incremental training")]
    EmptyStore,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
