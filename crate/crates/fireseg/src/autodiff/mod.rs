//! Minimal reverse-mode automatic differentiation.
//!
//! Forward operations build a DAG of [`Tensor`] nodes; [`backward`] walks it
//! in reverse topological order and accumulates gradients into every tensor
//! that requires them. The op set is exactly what the segmentation models
//! need: dilated/strided convolution, transpose convolution, batch and layer
//! normalization, activations, affine maps, batched matmul/softmax for
//! attention, and the window partition/reverse pair for shifted-window
//! attention.
//!
//! The element type is generic: `f32` for speed, `f64` wherever gradients
//! are checked against central finite differences (see [`gradcheck`]).

mod backward;
pub mod gradcheck;
mod kernels;
pub mod ops;
mod tensor;

pub use backward::{backward, backward_retain};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use ops::{ConvSpec, Mode};
pub use tensor::{no_grad, Scalar, Tensor};

pub(crate) use tensor::grad_enabled;
