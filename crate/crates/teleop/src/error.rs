use thiserror::Error;

#[derive(Debug, Error)]
pub enum TeleopError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unsupported protocol version {0}")]
    Version(u32),
    #[error("sequence {got} does not follow {last}")]
    Sequence { got: u64, last: u64 },
    #[error("hello required before `{0}`")]
    NoHello(String),
    #[error("bad token")]
    Token,
    #[error("`{action}` not allowed while {state}")]
    Lifecycle { action: String, state: String },
    #[error("final stage not reached; resend with force to keep it")]
    NotFinished,
    #[error("bad command: {0}")]
    Command(String),
    #[error(transparent)]
    Core(#[from] rial_core::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("websocket: {0}")]
    Socket(#[from] tungstenite::Error),
}

impl TeleopError {
    /// Short machine-readable code for error frames.
    pub fn code(&self) -> &'static str {
        match self {
            TeleopError::Malformed(_) => "malformed",
            TeleopError::Version(_) => "version",
            TeleopError::Sequence { .. } => "sequence",
            TeleopError::NoHello(_) => "no_hello",
            TeleopError::Token => "token",
            TeleopError::Lifecycle { .. } => "lifecycle",
            TeleopError::NotFinished => "not_finished",
            TeleopError::Command(_) => "command",
            TeleopError::Core(_) => "internal",
            TeleopError::Io(_) | TeleopError::Socket(_) => "transport",
        }
    }
}

pub type Result<T> = std::result::Result<T, TeleopError>;
