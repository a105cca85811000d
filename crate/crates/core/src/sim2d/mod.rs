//! Deterministic planar-arm simulator with staged tasks.

pub mod arm;
pub mod env;
pub mod gap;
pub mod kinematics;
pub mod physics;
pub mod render;
pub mod state;
pub mod task;

pub use arm::{ArmModel, Dynamics};
pub use env::{proprio, proprio_dim, Env, Observation, SimEnv, StepResult};
pub use gap::{GapEnv, RealityGapConfig};
pub use kinematics::{gripper_pose, GripperPose};
pub use physics::{step, CONTROL_HZ, DT};
pub use render::{render, VisualParams, VisualRanges, IMAGE_LEN, IMAGE_SIDE};
pub use state::{ObjectBody, PhysState};
pub use task::{StageSpec, StartDistribution, TaskKind, TaskSpec};
