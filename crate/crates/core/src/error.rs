use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("oracle budget exhausted: {used}/{budget} evaluations spent")]
    BudgetExhausted { used: usize, budget: usize },

    #[error("duplicate sample violates without-replacement contract: {0}")]
    DuplicateSample(String),

    #[error("enumeration bound exceeded: more than {limit} sequences")]
    EnumerationTooLarge { limit: usize },

    #[error("training diverged (non-finite loss) at step {step}; learning rate {learning_rate} is likely too high")]
    TrainDiverged { step: usize, learning_rate: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
