//! Desk-scale gated recurrent convolutional network toolkit.
//!
//! Everything is plain `f64` on the CPU, organized around a handful of
//! verifiable contracts rather than benchmark numbers:
//!
//! - [`kernels`] — dense numeric kernels (convolution, batch norm,
//!   activations, linear/pooling, softmax cross-entropy, FFT) with paired
//!   forward/backward passes checked against central finite differences.
//! - [`grcl`] — the gated recurrent convolutional layer, full network
//!   assembly, gate-ablation modes, parameter freezing, and a
//!   receptive-field probe.
//! - [`augment`] — CutMix, AugMix chains, FFT phase randomization, and
//!   texture/noise dataset generation.
//! - [`objectives`] — classification loss, Jensen–Shannon consistency,
//!   and the 11-superclass behavioral regularizer.
//! - [`trainer`] — SGD with momentum, staged fine-tuning, bit-reproducible
//!   checkpointing, and deterministic experiment orchestration.
//! - [`verify`] — finite-difference suites covering every backward pass.
//!
//! All stochastic operations are pure functions of `(input, seed)`; the
//! training trajectory is bitwise determined by `(seed, config, initial
//! checkpoint)`.

pub mod augment;
pub mod error;
pub mod grcl;
pub mod image_io;
pub mod kernels;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
