//! Variational Transformer language models with layer-wise latent variables.
//!
//! The crate covers the model (Transformer backbone, latent chain and the
//! four injection paradigms), the ELBO objective with its training tricks,
//! evaluation metrics, and a harness for training, sampling and analysis.

pub mod batch;
pub mod config;
mod error;
pub mod fusion;
pub mod harness;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod transformer;

pub use error::{Error, Result};
pub use lvt_tensor as tensor;
