//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every differentiable op returns `Result<Tensor>`: shape problems, domain
//! violations and non-finite outputs are reported at the op that produced
//! them instead of propagating silently.

mod backward;
mod broadcast;
mod element;
mod elementwise;
mod error;
pub mod gradcheck;
mod layout;
mod linalg;
mod nn;
mod op;
mod rng;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use nn::Mask;
pub use rng::RngState;
pub use tensor::{grad_enabled, NoGradGuard, Tensor};

/// i.i.d. standard normal draws; advances `rng.counter` by `product(shape)`.
pub fn sample_standard_normal<T: Element>(rng: &mut RngState, shape: &[usize]) -> Tensor<T> {
    Tensor::randn(shape, 1.0, rng)
}
