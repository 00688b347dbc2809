//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod graph;
mod params;
mod tape;
mod tensor;

pub use graph::{Activation, Graph};
pub use params::{axpy_update, dot, norm, FlatGradient, Layout, ParameterVector, Segment};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use params::check_layouts;
pub(crate) use tape::log_softmax_row;
