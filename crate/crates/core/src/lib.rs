//! Minimum-norm outcome bridge estimation for panel data.
//!
//! The crate estimates the counterfactual mean of untreated outcomes for a
//! treated group when both groups share latent confounders that act
//! through a linear factor structure. Pre-treatment outcomes enter a
//! bridge function; post-treatment outcomes of untreated units serve as
//! instruments. The bridge is usually not unique, so the estimator
//! targets the minimum-norm solution through ridge-regularized GMM.
//!
//! Modules:
//! - [`panel`]: data container, CSV I/O, validation.
//! - [`numerics`]: pseudoinverse, penalized solves, normal quantiles.
//! - [`dgp`]: synthetic panels with ground truth.
//! - [`bridge`]: the regularized GMM estimator and its inference.
//! - [`baselines`]: difference-in-differences, horizontal and vertical
//!   regression, and a four-step factor estimator.
//! - [`oracle`]: population quantities used to check the estimators.
//! - [`harness`]: Monte Carlo scenarios and summaries.

pub mod baselines;
pub mod bridge;
pub mod dgp;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod oracle;
pub mod panel;
pub mod rng;

mod matser;

pub use error::{Error, Result};
