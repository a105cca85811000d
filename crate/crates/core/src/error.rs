use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] rial_nnkit::NnError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("configuration: {0}")]
    Config(String),
    #[error("invalid action: {0}")]
    Action(String),
    #[error("state mismatch: {0}")]
    State(String),
    #[error("decode: {0}")]
    Decode(String),
    #[error("privileged state access is disabled")]
    PrivilegedDisabled,
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("replay diverged at step {step}: {field}")]
    Divergence { step: usize, field: String },
    #[error("shape: {0}")]
    Shape(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 1 for user errors, 2 for internal faults.
    pub fn exit_code(&self) -> i32 {
        match self {
            // unreadable or mismatched checkpoint files are the caller's
            Error::Nn(rial_nnkit::NnError::Checkpoint(_) | rial_nnkit::NnError::Io(_)) => 1,
            Error::Nn(_) | Error::NonFinite(_) => 2,
            _ => 1,
        }
    }
}
