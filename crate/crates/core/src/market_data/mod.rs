//! Market data: raw microstructure records, indicator states, and splits.
//!
//! A [`Dataset`] keeps four series (LOB snapshots, per-bar trades, mark/funding
//! points, indicator states) aligned on one strictly increasing timestamp
//! grid. Data comes either from CSV files ([`load_dataset`]) or from the
//! regime-switching synthetic generator ([`generate_synthetic`]). Indicators
//! are computed in a second pass ([`compute_indicators`]) and z-scored with
//! training-split statistics only, so the chronological split must be fixed
//! first ([`split_chrono`]).

mod indicators;
mod load;
mod synthetic;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use indicators::{compute_indicators, default_indicators, Indicator};
pub use load::{load_dataset, save_dataset, DataPaths, LoadSchema};
pub use synthetic::{generate_synthetic, generate_synthetic_with_truth, RegimeSpec, SyntheticCfg};

/// Aggregated resting orders at one timestamp; both sides best-first.
#[derive(Debug, Clone, PartialEq)]
pub struct LobSnapshot {
    pub ts: u64,
    /// `(price, qty)` with strictly decreasing prices.
    pub bids: Vec<(f64, f64)>,
    /// `(price, qty)` with strictly increasing prices.
    pub asks: Vec<(f64, f64)>,
}

impl LobSnapshot {
    pub fn depth(&self) -> usize {
        self.bids.len().max(self.asks.len())
    }

    pub fn best_bid(&self) -> f64 {
        self.bids[0].0
    }

    pub fn best_ask(&self) -> f64 {
        self.asks[0].0
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.best_bid() + self.best_ask())
    }

    /// Structural checks: non-empty sides, positive quantities, sorted levels,
    /// and an uncrossed book.
    pub fn validate(&self) -> Result<()> {
        if self.bids.is_empty() || self.asks.is_empty() {
            return Err(CoreError::InvalidData(format!("ts {}: empty book side", self.ts)));
        }
        for side in [&self.bids, &self.asks] {
            if side.iter().any(|&(p, q)| !(p > 0.0) || !(q > 0.0)) {
                return Err(CoreError::InvalidData(format!(
                    "ts {}: non-positive price or qty in book",
                    self.ts
                )));
            }
        }
        if self.bids.windows(2).any(|w| w[1].0 >= w[0].0) {
            return Err(CoreError::InvalidData(format!(
                "ts {}: bid prices not strictly decreasing",
                self.ts
            )));
        }
        if self.asks.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(CoreError::InvalidData(format!(
                "ts {}: ask prices not strictly increasing",
                self.ts
            )));
        }
        if self.best_ask() <= self.best_bid() {
            return Err(CoreError::InvalidData(format!(
                "ts {}: crossed book (best ask {} <= best bid {})",
                self.ts,
                self.best_ask(),
                self.best_bid()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Buy,
    Sell,
}

/// One executed order.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeRecord {
    pub ts: u64,
    pub price: f64,
    pub qty: f64,
    pub side: Side,
}

/// Mark price and funding information at one timestamp. `funding_rate` is
/// nonzero only at settlement timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkPoint {
    pub ts: u64,
    pub mark: f64,
    pub funding_rate: f64,
    pub seconds_to_funding: u64,
}

/// The decision-process state at one timestamp: indicator vector plus the
/// agent-dependent position and the funding countdown.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    pub ts: u64,
    pub indicators: Vec<f64>,
    /// Signed contracts currently held (filled in by the environment).
    pub position: f64,
    /// `(hours, minutes)` until the next funding settlement.
    pub funding_countdown: (u32, u32),
}

impl MarketState {
    /// Network input: indicators followed by normalized position and countdown.
    pub fn features(&self, h_max: f64) -> Vec<f64> {
        let mut f = self.indicators.clone();
        f.push(self.position / h_max);
        f.push(self.funding_countdown.0 as f64 / 8.0);
        f.push(self.funding_countdown.1 as f64 / 60.0);
        f
    }

    /// Input width produced by [`MarketState::features`] for `d` indicators.
    pub fn feature_dim(indicator_dim: usize) -> usize {
        indicator_dim + 3
    }
}

/// Contiguous chronological index ranges: train, then valid, then test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

/// Aligned series on a shared strictly increasing timestamp grid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub lob: Vec<LobSnapshot>,
    /// Trades attributed to each grid timestamp.
    pub trades: Vec<Vec<TradeRecord>>,
    pub mark: Vec<MarkPoint>,
    /// Indicator states; empty until [`compute_indicators`] runs.
    pub states: Vec<MarketState>,
    pub splits: Option<SplitRanges>,
    /// First index with a fully defined indicator vector.
    pub warmup: usize,
    /// Timestamps discarded while aligning the input files.
    pub dropped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.mark.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mark.is_empty()
    }

    pub fn timestamps(&self) -> impl Iterator<Item = u64> + '_ {
        self.mark.iter().map(|m| m.ts)
    }

    pub fn marks(&self) -> Vec<f64> {
        self.mark.iter().map(|m| m.mark).collect()
    }

    /// Shared-grid invariants: equal lengths, strictly increasing timestamps,
    /// matching timestamps across series, valid books, positive marks.
    pub fn validate(&self) -> Result<()> {
        let n = self.mark.len();
        if self.lob.len() != n || self.trades.len() != n {
            return Err(CoreError::InvalidData(format!(
                "series lengths differ: lob {}, trades {}, mark {}",
                self.lob.len(),
                self.trades.len(),
                n
            )));
        }
        for i in 0..n {
            if self.lob[i].ts != self.mark[i].ts {
                return Err(CoreError::InvalidData(format!(
                    "timestamp mismatch at row {i}: lob {} vs mark {}",
                    self.lob[i].ts, self.mark[i].ts
                )));
            }
            if i > 0 && self.mark[i].ts <= self.mark[i - 1].ts {
                return Err(CoreError::InvalidData(format!(
                    "timestamps not strictly increasing at row {i} (ts {})",
                    self.mark[i].ts
                )));
            }
            if !(self.mark[i].mark > 0.0) {
                return Err(CoreError::InvalidData(format!(
                    "non-positive mark at ts {}",
                    self.mark[i].ts
                )));
            }
            self.lob[i].validate()?;
            for tr in &self.trades[i] {
                if !(tr.price > 0.0) || !(tr.qty > 0.0) {
                    return Err(CoreError::InvalidData(format!(
                        "non-positive trade price/qty at ts {}",
                        tr.ts
                    )));
                }
            }
        }
        if !self.states.is_empty() {
            if self.states.len() != n {
                return Err(CoreError::InvalidData(
                    "state series length differs from grid".into(),
                ));
            }
            for st in &self.states[self.warmup..] {
                if st.indicators.iter().any(|v| !v.is_finite()) {
                    return Err(CoreError::InvalidData(format!(
                        "non-finite indicator at ts {} after warm-up",
                        st.ts
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fix contiguous chronological train/valid/test ranges from ratios.
///
/// Boundaries are floored: 100 rows at `(0.5, 0.25, 0.25)` give
/// `[0,50) / [50,75) / [75,100)`. Any empty range is an error.
pub fn split_chrono(mut ds: Dataset, ratios: (f64, f64, f64)) -> Result<Dataset> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return Err(CoreError::InvalidConfig("split ratios must be positive".into()));
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(CoreError::InvalidConfig(format!(
            "split ratios must sum to 1, got {}",
            a + b + c
        )));
    }
    let n = ds.len();
    let cut1 = (n as f64 * a).floor() as usize;
    let cut2 = (n as f64 * (a + b)).floor() as usize;
    let splits = SplitRanges { train: 0..cut1, valid: cut1..cut2, test: cut2..n };
    for (name, r) in
        [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)]
    {
        if r.is_empty() {
            return Err(CoreError::InvalidData(format!(
                "{name} split is empty for {n} rows at ratios ({a}, {b}, {c})"
            )));
        }
    }
    ds.splits = Some(splits);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(n: usize) -> Dataset {
        let mut ds = Dataset::default();
        for i in 0..n {
            let ts = 1000 + i as u64 * 300;
            let mark = 100.0;
            ds.lob.push(LobSnapshot {
                ts,
                bids: vec![(mark - 0.5, 1.0)],
                asks: vec![(mark + 0.5, 1.0)],
            });
            ds.trades.push(vec![TradeRecord { ts, price: mark, qty: 1.0, side: Side::Buy }]);
            ds.mark.push(MarkPoint { ts, mark, funding_rate: 0.0, seconds_to_funding: 100 });
        }
        ds
    }

    #[test]
    fn split_boundaries_are_floored() {
        let ds = split_chrono(tiny_dataset(100), (0.5, 0.25, 0.25)).unwrap();
        let s = ds.splits.unwrap();
        assert_eq!(s.train, 0..50);
        assert_eq!(s.valid, 50..75);
        assert_eq!(s.test, 75..100);
    }

    #[test]
    fn month_style_split_is_proportional() {
        // 24 "months" at (0.5, 0.25, 0.25) -> 12 / 6 / 6.
        let ds = split_chrono(tiny_dataset(24), (0.5, 0.25, 0.25)).unwrap();
        let s = ds.splits.unwrap();
        assert_eq!(s.train.len(), 12);
        assert_eq!(s.valid.len(), 6);
        assert_eq!(s.test.len(), 6);
    }

    #[test]
    fn degenerate_split_errors() {
        assert!(split_chrono(tiny_dataset(2), (0.5, 0.25, 0.25)).is_err());
    }

    #[test]
    fn bad_ratios_error() {
        assert!(split_chrono(tiny_dataset(10), (0.5, 0.25, 0.1)).is_err());
        assert!(split_chrono(tiny_dataset(10), (1.0, -0.5, 0.5)).is_err());
    }

    #[test]
    fn crossed_book_is_rejected() {
        let mut ds = tiny_dataset(3);
        ds.lob[1].asks[0].0 = ds.lob[1].bids[0].0 - 0.1;
        let err = ds.validate().unwrap_err().to_string();
        assert!(err.contains("crossed book"), "{err}");
        assert!(err.contains("1300"), "error should name the timestamp: {err}");
    }

    #[test]
    fn feature_vector_appends_position_and_countdown() {
        let st = MarketState {
            ts: 0,
            indicators: vec![0.1, 0.2],
            position: -1.0,
            funding_countdown: (4, 30),
        };
        let f = st.features(2.0);
        assert_eq!(f.len(), MarketState::feature_dim(2));
        assert_eq!(f[2], -0.5);
        assert_eq!(f[3], 0.5);
        assert_eq!(f[4], 0.5);
    }
}
