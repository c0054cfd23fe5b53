//! Online variational inference and parameter learning for discrete-state
//! hidden Markov models under the reversed mean-field approximation.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: generative HMM, softmax parametrisation, sampling, log joint.
//! - [`oracle`]: exact filtering/smoothing, enumeration, VFE, finite differences.
//! - [`mfa`]: mean-field families, the time-indexed hyperparameter history and
//!   its augmentation, the m-conditional and the pairwise approximate ELBO.
//! - [`elbo`]: constant-cost recursions for the ELBO and both gradients.
//! - [`learner`]: the streaming update loop.
//! - [`cli`]: experiment configs, file formats and the command implementations.

pub mod cli;
pub mod elbo;
pub mod error;
pub mod learner;
pub mod math;
pub mod mfa;
pub mod model;
pub mod oracle;

pub use error::{Error, Result};
