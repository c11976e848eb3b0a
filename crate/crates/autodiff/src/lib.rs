//! A small reverse-mode differentiation engine.
//!
//! Values are dense `f64` arrays ([`Tensor`]). Operations are recorded on a
//! [`Tape`] as they execute; [`Tape::backward`] walks the recording in
//! reverse and returns [`Gradients`] for every variable that requires one.
//!
//! The operator set is deliberately narrow: what a dilated convolutional
//! embedding network and its attractor loss need, plus [`Adam`] and a
//! finite-difference [`grad_check`] harness.

mod checkpoint;
mod error;
mod gemm;
mod gradcheck;
mod ops;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::BatchStats;
pub use optim::{Adam, ParamId, ParamStore, Parameter, PiecewiseConstant};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
