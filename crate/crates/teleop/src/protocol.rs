//! Wire messages. Every frame is one JSON object carrying the schema
//! version `v`, a per-direction sequence number `seq` and a `type` tag.

use serde::{Deserialize, Serialize};

use crate::error::TeleopError;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub v: u32,
    pub seq: u64,
    #[serde(flatten)]
    pub body: Message,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello(Hello),
    Obs(Box<Obs>),
    Cmd(Cmd),
    EpisodeCtl(EpisodeCtl),
    Ack(Ack),
    Error(ErrorFrame),
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello(_) => "hello",
            Message::Obs(_) => "obs",
            Message::Cmd(_) => "cmd",
            Message::EpisodeCtl(_) => "episode_ctl",
            Message::Ack(_) => "ack",
            Message::Error(_) => "error",
        }
    }
}

/// Sent by the client first; answered by the server with its own hello.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<String>,
    /// Filled in by the server.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<SessionInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: u64,
    pub task: String,
    pub stages: Vec<String>,
    pub control_hz: u32,
    pub episode_length: usize,
    pub link_lengths: Vec<f64>,
    pub finger_max_aperture: f64,
    pub action_dim: usize,
    /// World window shown by the thumbnail: center and half-width in meters.
    pub view_center: (f64, f64),
    pub view_half: f64,
    pub image_side: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Idle,
    Running,
    Paused,
    Saved,
    Discarded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub angle: f64,
    pub half_extents: (f64, f64),
    pub color: [u8; 3],
    pub attached: bool,
}

/// Scene description plus the policy-view thumbnail, streamed every tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obs {
    pub tick: u64,
    pub lifecycle: Lifecycle,
    pub episode_step: usize,
    pub stage: usize,
    pub stage_name: String,
    pub reward: f64,
    pub joint_angles: Vec<f64>,
    pub finger_aperture: f64,
    pub objects: Vec<SceneObject>,
    /// Executed action of the latest step.
    pub action: Vec<f64>,
    /// Sequence number of the command currently held, if any.
    pub held_cmd_seq: Option<u64>,
    /// Base-64 RGB bytes, row-major.
    pub thumbnail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmdMode {
    /// `axes = [vx, vy, w]`, gripper-frame velocity intent in `[-1, 1]`.
    Ee,
    /// `axes` are normalized joint velocities.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cmd {
    pub mode: CmdMode,
    pub axes: Vec<f64>,
    /// Aperture rate in `[-1, 1]`; positive opens.
    pub grip: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtlAction {
    Start,
    Pause,
    Resume,
    Save,
    Discard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeCtl {
    pub action: CtlAction,
    /// Save even though the final stage was not reached.
    #[serde(default)]
    pub force: bool,
    /// Reset seed for `start`; the session picks one when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub ref_seq: u64,
    pub lifecycle: Lifecycle,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorFrame {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_seq: Option<u64>,
    pub code: String,
    pub message: String,
}

pub fn encode(e: &Envelope) -> String {
    serde_json::to_string(e).expect("messages serialize")
}

pub fn decode(text: &str) -> Result<Envelope, TeleopError> {
    let e: Envelope = serde_json::from_str(text).map_err(|e| TeleopError::Malformed(e.to_string()))?;
    if e.v != PROTOCOL_VERSION {
        return Err(TeleopError::Version(e.v));
    }
    Ok(e)
}

/// Enforces strictly increasing `seq` for one direction.
#[derive(Clone, Debug, Default)]
pub struct SeqTracker {
    last: Option<u64>,
}

impl SeqTracker {
    pub fn accept(&mut self, seq: u64) -> Result<(), TeleopError> {
        if let Some(l) = self.last {
            if seq <= l {
                return Err(TeleopError::Sequence { got: seq, last: l });
            }
        }
        self.last = Some(seq);
        Ok(())
    }
}

/// Allocates outgoing sequence numbers.
#[derive(Clone, Debug, Default)]
pub struct SeqCounter {
    next: u64,
}

impl SeqCounter {
    pub fn wrap(&mut self, body: Message) -> Envelope {
        let seq = self.next;
        self.next += 1;
        Envelope {
            v: PROTOCOL_VERSION,
            seq,
            body,
        }
    }
}
