//! Leveraged perpetual-futures trading laboratory.
//!
//! The crate is organized as a pipeline of small modules:
//!
//! - [`market_data`]: load or synthesize LOB/trade/mark series, compute
//!   indicators, and produce chronological splits.
//! - [`env`]: deterministic perpetual-futures exchange simulator (market-order
//!   execution, margin, funding, liquidation) exposing an RL step interface.
//! - [`dp`]: backward dynamic programming over the action grid, producing the
//!   optimal action-value table and demonstration transitions.
//! - [`nn`]: from-scratch MLP / VAE substrate with exact gradients and an
//!   adaptive-moment optimizer.
//! - [`ensemble`]: ensemble of Q-learners trained with TD-error-matrix
//!   selective updates, plus a tabular harness for the same update rule.
//! - [`segment`]: slope-based piecewise segmentation and labeling of a price
//!   series into market dynamics.
//! - [`ood`]: per-dynamic VAE density models with ECDF-normalized scores.
//! - [`router`]: EMA-smoothed regime scoring and risk-aware policy dispatch
//!   with a conservative stop-loss fallback.
//! - [`backtest`]: policy rollouts, the financial/behavioral metric suite, and
//!   the end-to-end artifact pipeline.
//!
//! Everything is deterministic given the configured seeds; see `config` for
//! the single TOML schema shared by the library and the CLI.

pub mod backtest;
pub mod config;
pub mod dp;
pub mod ensemble;
pub mod env;
pub mod error;
pub mod market_data;
pub mod nn;
pub mod ood;
pub mod pipeline;
pub mod router;
pub mod segment;

pub use error::{CoreError, Result};
