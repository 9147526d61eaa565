//! Black-box variational inference: stochastic maximization of the ELBO with
//! score-function gradient estimators, Rao-Blackwellization, control variates,
//! adaptive step sizes, data subsampling for hierarchical models, and a
//! Metropolis-Hastings-within-Gibbs baseline over the same model description.

pub mod baseline;
pub mod error;
pub mod estimators;
pub mod families;
pub mod model;
pub mod optimize;
pub mod zoo;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
