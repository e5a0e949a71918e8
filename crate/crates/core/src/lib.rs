//! Curvature-aware structured Gaussian covariance for probabilistic
//! spatio-temporal forecasting.
//!
//! The crate is organised bottom-up:
//!
//! * [`graph`]: weighted graphs, Balanced Forman curvature, bottleneck
//!   reweighting and spectral diagnostics (Kirchhoff index, conductance).
//! * [`covariance`]: temporal kernel mixtures, the curvature-aware spatial
//!   factor covariance and the implicit batch covariance with its
//!   Woodbury-based likelihood and Gaussian conditioning.
//! * [`forecaster`]: a small autoregressive backbone with covariance heads,
//!   analytic gradients and a deterministic trainer.
//! * [`sampler`]: volatility-scaled conditional residual sampling and
//!   multi-step rollouts.
//! * [`metrics`]: CRPS, quantile loss and MAE.
//! * [`dataio`]: synthetic data, CSV IO, graph construction and splits.
//! * [`pipeline`]: synthetic experiments, ablation variants and rolling
//!   evaluation.

// index loops mirror the matrix algebra; `!(x > 0.0)` also rejects NaN
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod covariance;
pub mod dataio;
pub mod error;
pub mod forecaster;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod rngs;
pub mod sampler;

pub use error::{Error, Result};
