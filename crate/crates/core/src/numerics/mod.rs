//! Dense tensors, forward kernels, a gradient tape and a finite-difference checker.

pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheckReport};
pub use ops::{
    bilinear_resize, broadcast_shape, broadcast_to, concat0, conv2d, conv_out_extent, elementwise,
    matmul, relu, sigmoid, slice0, softmax_lastdim, transpose, ElementwiseKind,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
