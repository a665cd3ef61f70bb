//! Dense tensors, a reverse-mode tape, the layer primitives the network is
//! built from, Adam, and the checkpoint format.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{Activation, BatchNorm, BlockLinear, Dense, Linear, Mlp, Mode, Session};
pub use optim::{AdamConfig, AdamState};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
