//! Stochastic optimisation for marginal maximum likelihood in continuous
//! latent variable models.
//!
//! The crate provides the multilevel logistic regression and confirmatory
//! M2PL models, MALA and random-walk Metropolis-Hastings kernels, the
//! fullbatch / minibatch / quasi-Newton outer loop with Polyak-Ruppert
//! averaging, post-fit estimators, and a simulation-study harness.

pub mod error;
pub mod estimators;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
pub use model::{Dataset, LatentModel, LatentState, ModelKind, ParamVector};
pub use optimizer::{run, Algorithm, FitResult, OptimizerConfig};
pub use sampler::{SamplerConfig, SamplerKind};
