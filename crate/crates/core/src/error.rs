use thiserror::Error;

pub type Result<T> = std::result::Result<T, MvecError>;

#[derive(Debug, Error)]
pub enum MvecError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("prefix dimension {m} out of range 1..={len}")]
    PrefixRange { m: usize, len: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("id {0} already present in store")]
    Conflict(u64),

    #[error("bounds error: {0}")]
    Bounds(String),

    #[error("unknown utterance id {0}")]
    Lookup(u64),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MvecError {
    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            MvecError::Dimension { .. } | MvecError::PrefixRange { .. } => "dimension",
            MvecError::DegenerateInput(_) => "degenerate_input",
            MvecError::EmptyInput(_) => "empty_input",
            MvecError::Label { .. } => "label",
            MvecError::Config(_) => "config",
            MvecError::Conflict(_) => "conflict",
            MvecError::Bounds(_) => "bounds",
            MvecError::Lookup(_) => "lookup",
            MvecError::TrainingDiverged { .. } => "training_diverged",
            MvecError::Generation(_) => "generation",
            MvecError::Format(_) => "format",
            MvecError::Io(_) => "io",
        }
    }
}
