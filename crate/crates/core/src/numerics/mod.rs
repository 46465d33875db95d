//! Dense tensors, a reverse-mode tape, Adam, and gradient verification.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_difference_gradient, CheckReport, Fault};
pub use tape::{Gradients, NceMode, NodeId, Padding, Tape};
pub use tensor::Tensor;

/// Element type for all numeric work. Double precision by default;
/// build with the `single-precision` feature to trade gradient-check
/// headroom for speed.
#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
#[cfg(feature = "single-precision")]
pub type Real = f32;

use rand::Rng;

/// Tensor with entries drawn uniformly from `[lo, hi)`.
pub fn uniform_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, lo: Real, hi: Real) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<Real> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape/data consistent by construction")
}
