//! Bootstrap-your-own-latent representation learning with pluggable
//! normalization, weight standardization, and batch self-labeling losses.
//!
//! Everything runs on a small CPU autodiff engine ([`tensor`]). The crate is
//! split by concern:
//!
//! * [`tensor`]: dense tensors, the gradient tape, finite-difference checks
//! * [`checks`]: randomized gradient checks over every primitive and loss
//! * [`nn`]: layers, normalization schemes, weight standardization
//! * [`model`]: encoder/projector/predictor, the online/target pair, checkpoints
//! * [`augment`]: stochastic view generation
//! * [`loss`]: BYOL, cross-cosine and cross-sigmoid self-labeling losses, NT-Xent
//! * [`data`]: STL10 binary layout, synthetic shapes, batching
//! * [`train`]: optimizer, training loop, metrics
//! * [`eval`]: linear probe, similarity reports, accuracy curves
//! * [`config`]: run configuration file

// Validation is written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod checks;
pub mod config;
pub mod data;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use tensor::{Scalar, Tape, Tensor, TensorError, Var};
