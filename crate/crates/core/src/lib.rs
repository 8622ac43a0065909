//! Self-supervised functional-connectome encoder and its evaluation stack.
//!
//! The crate trains a 1D-convolution + attention encoder on multi-region time
//! series with a segment-based contrastive objective, and evaluates the
//! learned connectomes with subject fingerprinting, test-retest ICC, linear
//! probes and TPE hyperparameter search. Everything runs on synthetic cohorts
//! generated by [`synth`].

pub mod contrastive;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod evalsuite;
pub mod gradsuite;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod tpe;
pub mod train;
pub mod variability;

pub use error::{Error, Result};
