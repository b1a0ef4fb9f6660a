//! Minimal neural-network stack: dense f64 tensors, reverse-mode autodiff over
//! a per-call tape, two optimizers (Adam and Schedule-Free AdamW), and a
//! binary checkpoint container shared by every trained model in the crate.
//!
//! Written by hand rather than binding a framework: the models here are small
//! (a two-layer set-transformer policy and a six-layer ViT), the training loops
//! need bit-reproducible behavior under a fixed seed, and gradients must be
//! finite-difference-checkable to 1e-3. The tape executes eagerly and
//! single-threaded; gradient accumulation order is the reverse of construction
//! order, which makes runs deterministic by construction.

mod checkpoint;
mod gradcheck;
pub mod init;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use optim::{Adam, ScheduleFreeAdamW};
pub use tape::{bind_set, Grads, ParamId, SetBinding, Tape, VarId};
pub use tensor::{ParamSet, Tensor};
