//! The four networks: visuomotor policy (with its auxiliary head), value
//! function on privileged state, and the object-centric discriminator.

pub mod mlp;
pub mod policy;

pub use mlp::{DiscriminatorNet, ValueNet};
pub use policy::{LstmState, PolicyConfig, PolicyStep, SeqInput, SeqOutput, VisuomotorPolicy};
