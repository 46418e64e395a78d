//! Dense kernels with a differentiation contract.
//!
//! Everything here runs in `f64`. Each forward kernel in [`kernels`] has a
//! matching backward function, [`tape`] composes them into reverse-mode
//! autodiff, and [`grad_check`] verifies the result against central finite
//! differences.

pub mod grad_check;
pub mod kernels;
pub mod matrix;
pub mod tape;

pub use grad_check::{central_difference, grad_check, relative_error, GradCheckReport};
pub use kernels::{
    linear_backward, linear_forward, masked_layer_norm, masked_softmax, Linear, LinearParams, MaskedNorm,
    MaskedNormParams, NORM_EPSILON,
};
pub use matrix::Matrix;
pub use tape::{Gradients, Graph, Var};

/// Tolerance for finite-difference gradient checks at 64-bit precision.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
/// Step used by the gradient checks.
pub const GRAD_CHECK_EPSILON: f64 = 1e-5;

/// Independent ChaCha generator for `stream` under the root `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
