//! Counterfactual alignment toolkit.
//!
//! Generates latent-shift counterfactuals for small MLP classifiers through a
//! fixed autoencoder, measures how other classifiers respond with the
//! relative-change metric, and uses that signal to detect, fabricate and
//! rectify spurious correlations on procedurally generated images.

pub mod alignment;
pub mod autodiff;
pub mod bias;
pub mod data;
pub mod cf;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod kernels;
pub mod models;
pub mod nn;
pub mod optim;
pub mod par;
pub mod report;
pub mod seed;
pub mod stats;
pub mod tensor;

pub use autodiff::{LossKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
