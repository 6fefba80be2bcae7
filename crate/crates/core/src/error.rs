use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("non-finite value at layer {layer} ({kind})")]
    NonFiniteLayer { layer: usize, kind: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("incompatible layer {index}: {reason}")]
    IncompatibleLayer { index: usize, reason: String },
    #[error("activation record does not match network: {0}")]
    RecordMismatch(String),
    #[error("tape was recorded detached and cannot be differentiated")]
    DetachedTape,
    #[error("perturbation flipped a ReLU activation at parameter {0}")]
    ActivationFlip(usize),
    #[error("cap exceeded: {what} needs {needed}, cap is {cap}")]
    CapExceeded {
        what: &'static str,
        needed: usize,
        cap: usize,
    },
    #[error("layer {0} is outside the MLP path formalism")]
    NotAnMlp(usize),
    #[error("eigensolver did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),
    #[error("mask keeps {available} parameters but {requested} were requested")]
    NotEnoughSurvivors { available: usize, requested: usize },
    #[error("round {t} out of range 1..={rounds}")]
    RoundOutOfRange { t: usize, rounds: usize },
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("class {class} has {available} examples, {requested} requested")]
    ClassTooSmall {
        class: usize,
        available: usize,
        requested: usize,
    },
    #[error("wrong magic number in {file}: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic {
        file: String,
        expected: u32,
        found: u32,
    },
    #[error("truncated file {0}")]
    Truncated(String),
    #[error("example count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("io error: {0}")]
    Io(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
