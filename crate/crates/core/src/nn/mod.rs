//! Minimal feedforward-network substrate.
//!
//! Everything here is hand-rolled on flat `f64` buffers:
//! - [`Mlp`]: multilayer perceptron (ReLU hidden, identity output) with exact
//!   backpropagation,
//! - [`Adam`]: adaptive-moment optimizer with a linear learning-rate decay,
//! - [`huber`] / [`softmax`] / [`kl_divergence`]: loss building blocks,
//! - [`Vae`]: Gaussian-output variational autoencoder,
//! - [`checkpoint`]: versioned binary tensor files that round-trip bit-exactly.
//!
//! Training is deterministic given a seed: initialization, batch order, and
//! noise draws all come from explicitly seeded ChaCha streams.

mod adam;
pub mod checkpoint;
mod loss;
mod mlp;
mod vae;

pub use adam::{Adam, AdamCfg, LrSchedule};
pub use loss::{huber, huber_grad, kl_divergence, kl_grad_logits, softmax};
pub use mlp::{Forward, Mlp};
pub use vae::{Vae, VaeLoss};
