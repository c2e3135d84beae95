//! Reverse-mode differentiation over dense matrices.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheck, GradCheckEntry};
pub use params::{BoundParams, ParamCoord, ParamId, ParameterStore};
pub use tape::{Gradients, Index, Tape, Var};
pub use tensor::Tensor;
