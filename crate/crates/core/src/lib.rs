//! Embarrassingly parallel sequential MCMC (EP-SMCMC) for large panels of
//! positive-valued time series.
//!
//! The panel is split into cross-sectional blocks of series. Each block runs
//! `L` sequential MCMC chains whose state grows as new time rows arrive; the
//! parameter draws of every block are turned into Gaussian kernel density
//! estimates and multiplied together to approximate the full posterior.
//!
//! The observation model is the gamma-beta stochastic volatility model:
//!
//! ```text
//! y_t | x_t     ~ Gamma(kappa / 2, rate = kappa * x_t / 2)
//! x_t | x_{t-1} =  x_{t-1} * psi_t / lambda,   psi_t ~ Beta(nu / 2, kappa / 2)
//! ```
//!
//! Modules:
//! - [`model`]: parameters, panels, simulation, complete-data likelihood and priors.
//! - [`filtering`]: conjugate forward filter, backward sampling and the jumping full conditional.
//! - [`smcmc`]: one sequential MCMC chain (transition and jumping kernels, adaptive sweep count).
//! - [`merge`]: kernel density sub-posteriors and the product-of-mixtures sampler.
//! - [`orchestrator`]: the end-to-end parallel driver.
//! - [`smc`]: regularized auxiliary particle filter baseline.
//! - [`bench`]: full-MCMC baseline, MSE tables and timing.
//! - [`io`]: CSV and sidecar formats.

pub mod bench;
pub mod error;
pub mod filtering;
pub mod io;
pub mod merge;
pub mod model;
pub mod orchestrator;
pub mod rng;
pub mod smc;
pub mod smcmc;
pub mod stats;

pub use error::{Error, Result};
pub use model::{BlockPartition, InitialState, LatentBlock, Panel, PriorSpec, Theta};
pub use orchestrator::{run_ep_smcmc, RunConfig, RunResult};

/// Library version, recorded in output manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
