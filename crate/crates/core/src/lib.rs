//! Forecasting counterfactual outcomes in partially observed panels.
//!
//! The pipeline estimates latent factors by pairwise-complete PCA, fits
//! autoregressive dynamics to the estimated factors, and produces
//! multi-step point forecasts with asymptotic confidence intervals. A
//! simulation harness generates synthetic panels, scores forecasts
//! against ground truth, and runs seeded Monte Carlo experiments.

pub mod detrend;
pub mod dynamics;
pub mod error;
pub mod factors;
pub mod inference;
pub mod io;
mod linalg;
pub mod panel;
pub mod patterns;
pub mod pipeline;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use panel::{build_overlap_index, compute_overlap_stats, OverlapIndex, OverlapStats, Panel};
