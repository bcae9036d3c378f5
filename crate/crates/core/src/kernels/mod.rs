//! Dense numeric kernels with paired forward/backward passes.
//!
//! Every kernel is a pure function over immutable inputs: identical inputs
//! produce bitwise-identical outputs, and nothing mutates shared state.
//! Parallel loops only ever split across disjoint output regions, so results
//! do not depend on the thread count.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dense;
pub mod fft;
pub mod gradcheck;

pub use activation::{hadamard, hadamard_backward, relu, relu_backward, sigmoid, sigmoid_backward};
pub use batchnorm::{batch_norm_backward, batch_norm_eval, batch_norm_train, BatchNormState, Phase};
pub use conv::{conv2d, conv2d_backward, conv2d_cached, Conv2dCache, ConvGrads, ConvSpec};
pub use dense::{
    global_avg_pool, global_avg_pool_backward, linear, linear_backward, softmax, softmax_backward,
    softmax_cross_entropy,
};
pub use fft::{fft2d, ifft2d, Complex};
pub use gradcheck::{finite_difference_gradient, max_relative_error, relative_error};
