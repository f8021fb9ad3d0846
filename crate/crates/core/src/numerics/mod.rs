//! Dense `f64` tensors, forward kernels and a reverse-mode tape.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_subset, GradCheckReport};
pub use kernels::{
    avg_pool2, bilinear_sample_2d, conv2d, identity_grid, layer_norm, silu, softplus,
};
pub use tape::{CharbonnierMode, CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::charbonnier_value;
