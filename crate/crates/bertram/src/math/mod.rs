//! Minimal dense-tensor engine: f32 tensors, a Wengert tape for reverse-mode
//! differentiation, Adam, finite-difference verification and a checkpoint
//! container.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig, Schedule};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::grad_check;
pub use tape::{Tape, VarId};
pub use tensor::{sigmoid, softmax, Parameter, Tensor};
