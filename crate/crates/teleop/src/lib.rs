//! Operator teleoperation bridge: a websocket session server that drives
//! the simulator at the control rate from the latest operator command and
//! records episodes in the demonstration format.
//!
//! The wire format is described in `docs/teleop-protocol.md`.

pub mod error;
pub mod mailbox;
pub mod protocol;
pub mod server;
pub mod session;

pub use error::{Result, TeleopError};
pub use mailbox::Mailbox;
pub use server::{bind, Server, ServerConfig, ServerHandle};
pub use session::{Session, SessionConfig};
