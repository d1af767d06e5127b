//! Global-feature-enhanced convolutional networks for fault diagnosis of
//! multivariate process data.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors and a reverse-mode autodiff tape.
//! * [`layers`]: convolution, max pooling, dense, dropout and the softmax
//!   cross-entropy head.
//! * [`arch`]: architecture strings such as `C(16)-P(2)-G(10)-F(100)*`,
//!   shape tracing, parameter accounting and the model file format.
//! * [`datapipe`]: normalisation, windowing, grayscale image conversion,
//!   CSV ingestion and a synthetic fault generator.
//! * [`train`]: minibatch Adam training.
//! * [`eval`]: confusion matrices, per-class fault diagnosis rate and
//!   variable correlation.
//! * [`cli`]: the `gfcnn` command line.
//!
//! Data-parallel regions (per-sample gradients inside a minibatch, batched
//! inference, window conversion) go through [`exec`], which uses rayon when
//! the `parallel` feature is on and runs sequentially otherwise. Results
//! are identical either way.

pub mod arch;
pub mod cli;
pub mod datapipe;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod layers;
pub mod real;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
