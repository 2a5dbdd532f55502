//! Dense tensors with tape-based reverse-mode differentiation.

mod checkpoint;
mod gradcheck;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{ParamId, ParamKind, Parameter, ParameterSet};
pub use rng::SeedTree;
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
