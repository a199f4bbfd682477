//! Dense tensor kernels, the gradient tape, and the finite-difference oracle.

pub mod fd;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use fd::{finite_difference_gradient, max_relative_error, relative_error, DifferentiableFn};
pub use ops::{
    cosine_similarity, global_average_pool, layer_norm, linear, softmax, COSINE_EPS,
    LAYER_NORM_EPS,
};
pub use tape::{Gradients, Reduction, Tape, TensorId};
pub use tensor::{Real, Tensor};
