//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod array;
mod exact;
pub(crate) mod ops;
mod rope;
mod tape;

pub use array::{broadcast_shapes, Array};
pub use exact::{exact_sum_value, ExactAccumulator, LIMBS};
pub use ops::{sigmoid, softplus, SoftmaxOutput};
pub use rope::{rope_rotate, ROPE_BASE};
pub use tape::{Backward, Precision, Tape, Tensor};
