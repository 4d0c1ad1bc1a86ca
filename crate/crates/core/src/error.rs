use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("discrete action {index} out of bounds for {n} actions")]
    OutOfBoundsAction { index: usize, n: usize },
    #[error("non-finite continuous action component")]
    NonFiniteAction,
    #[error("action kind does not match the action space")]
    ActionKindMismatch,
    #[error("step called on a terminated episode")]
    EpisodeTerminated,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("forward pass produced a non-finite output")]
    NonFiniteOutput,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite importance ratio at index {0}")]
    NonFiniteRatio(usize),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("policy buffer is empty")]
    EmptyBuffer,
    #[error("linear system is singular")]
    SingularSystem,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no runs found under {0}")]
    NoRuns(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
