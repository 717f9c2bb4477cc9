//! Reverse-mode differentiation over dense row-major `f32`/`f64` arrays.

mod checkpoint;
mod fdcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint};
pub use fdcheck::{finite_difference_check, FdReport};
pub use params::{Group, Param, ParamGrads, ParamSet};
pub use tape::{Bindings, Primitive, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{matmul_raw, sigmoid};
