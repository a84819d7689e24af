//! Desk-scale laboratory for studying overreaction in earnings forecasts.
//!
//! The library covers five layers that the `overlab` binary wires together:
//!
//! - [`synth`] — a seedable panel data-generating process with a
//!   diagnostic-expectations forecast rule, so every downstream statistic
//!   has a closed-form or brute-force oracle.
//! - [`gbrt`] — from-scratch depth-limited regression trees and
//!   least-squares gradient boosting with shrinkage.
//! - [`regress`] — dense OLS, two-way fixed effects, cluster-robust and
//!   SUR covariance, and forecast-evaluation statistics.
//! - [`harness`] / [`overreact`] — the rolling-window forecasting protocol
//!   and the overreaction test battery run on its output.
//! - [`equilibrium`] — a repeated static noisy-rational-expectations model
//!   of equity issuance with tech/non-tech analyst signals.
//!
//! Everything is deterministic given a seed: RNG streams are pre-split per
//! firm, parallel reductions are keyed and order-independent, and output
//! rows are sorted before writing.

pub mod equilibrium;
mod error;
pub mod gbrt;
pub mod harness;
pub mod overreact;
pub mod regress;
pub mod synth;

pub use error::{Error, Result};
