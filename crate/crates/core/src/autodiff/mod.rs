//! Tensors on a reverse-mode tape, the primitive layers, checkpoints and the
//! finite-difference gradient checker.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod param;
pub mod tape;

pub use ops::{Conv2dSpec, Mode};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Backward, Gradients, Tape, Var};
