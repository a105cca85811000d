//! Dense tensors, a reverse-mode tape, the layers needed for small
//! visuomotor networks (dense, valid convolution, LSTM), a diagonal Gaussian
//! head, Adam, checkpoints and finite-difference gradient checks.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gaussian;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use gaussian::DiagGaussian;
pub use graph::{Gradients, Graph, Var};
pub use params::{Init, Param, ParamStore};
pub use tensor::{Element, Tensor};
