//! Technical indicators over the aligned series.
//!
//! Features are computed row by row, then every column is z-scored using
//! statistics taken from the training split only (post-warm-up rows), so the
//! chronological split must already be fixed on the dataset.

use serde::{Deserialize, Serialize};

use super::{Dataset, MarketState};
use crate::error::{CoreError, Result};

/// One feature column. Parameters are in bars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Indicator {
    /// `ln(mark_t / mark_{t-lag})`.
    LogReturn { lag: usize },
    /// `EMA(mark, period) / mark − 1`.
    EmaRatio { period: usize },
    /// Std of 1-step log returns over the trailing window.
    RollingVol { window: usize },
    /// `Σ bid qty / (Σ bid qty + Σ ask qty)` over the visible book.
    LobImbalance,
    /// `(best ask − best bid) / mark`.
    RelativeSpread,
    /// Z-score of per-bar traded volume against its trailing window.
    VolumeZScore { window: usize },
}

impl Indicator {
    /// Bars needed before this feature is defined.
    fn warmup(&self) -> usize {
        match self {
            Indicator::LogReturn { lag } => *lag,
            Indicator::EmaRatio { .. } => 0,
            Indicator::RollingVol { window } => *window,
            Indicator::LobImbalance | Indicator::RelativeSpread => 0,
            Indicator::VolumeZScore { window } => window.saturating_sub(1),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Indicator::LogReturn { lag } => *lag >= 1,
            Indicator::EmaRatio { period } => *period >= 1,
            Indicator::RollingVol { window } => *window >= 2,
            Indicator::VolumeZScore { window } => *window >= 2,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidConfig(format!("indicator parameter too small: {self:?}")))
        }
    }
}

/// The default feature set: multi-horizon log returns, EMA ratios, rolling
/// volatilities, book imbalance, relative spread, and a volume z-score.
pub fn default_indicators() -> Vec<Indicator> {
    let mut spec = Vec::new();
    for lag in [1, 5, 15, 60, 240] {
        spec.push(Indicator::LogReturn { lag });
    }
    for period in [12, 26] {
        spec.push(Indicator::EmaRatio { period });
    }
    for window in [60, 240] {
        spec.push(Indicator::RollingVol { window });
    }
    spec.push(Indicator::LobImbalance);
    spec.push(Indicator::RelativeSpread);
    spec.push(Indicator::VolumeZScore { window: 240 });
    spec
}

/// Compute the indicator state series and z-score it with training statistics.
///
/// Rows before the warm-up horizon keep zeroed indicator vectors and are
/// flagged unusable via `Dataset::warmup`.
pub fn compute_indicators(mut ds: Dataset, spec: &[Indicator]) -> Result<Dataset> {
    if spec.is_empty() {
        return Err(CoreError::InvalidConfig("indicator spec is empty".into()));
    }
    for ind in spec {
        ind.validate()?;
    }
    let splits = ds.splits.clone().ok_or_else(|| {
        CoreError::InvalidConfig(
            "chronological split must be set before indicators so normalization \
             can use training statistics only"
                .into(),
        )
    })?;
    let n = ds.len();
    let warmup = spec.iter().map(Indicator::warmup).max().unwrap_or(0);
    if warmup >= n {
        return Err(CoreError::InvalidData(format!(
            "warm-up of {warmup} bars exceeds dataset length {n}"
        )));
    }
    if spec.iter().any(|i| matches!(i, Indicator::VolumeZScore { .. }))
        && ds.trades.iter().all(|t| t.is_empty())
    {
        return Err(CoreError::InvalidData(
            "indicator spec references trade volume but the dataset has no trades".into(),
        ));
    }

    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(spec.len());
    for ind in spec {
        columns.push(compute_column(&ds, ind));
    }

    // Training-split statistics over usable rows only; a zero-variance column
    // normalizes to all zeros rather than NaN.
    let train_rows = splits.train.start.max(warmup)..splits.train.end;
    if train_rows.is_empty() {
        return Err(CoreError::InvalidData(
            "training split has no usable rows after warm-up".into(),
        ));
    }
    for col in &mut columns {
        let slice = &col[train_rows.clone()];
        let m = slice.len() as f64;
        let mean = slice.iter().sum::<f64>() / m;
        let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        let std = var.sqrt();
        for (i, v) in col.iter_mut().enumerate() {
            *v = if i < warmup {
                0.0
            } else if std > 0.0 {
                (*v - mean) / std
            } else {
                0.0
            };
        }
    }

    ds.states = (0..n)
        .map(|i| {
            let s = ds.mark[i].seconds_to_funding;
            MarketState {
                ts: ds.mark[i].ts,
                indicators: columns.iter().map(|c| c[i]).collect(),
                position: 0.0,
                funding_countdown: ((s / 3600) as u32, ((s % 3600) / 60) as u32),
            }
        })
        .collect();
    ds.warmup = warmup;
    ds.validate()?;
    Ok(ds)
}

fn compute_column(ds: &Dataset, ind: &Indicator) -> Vec<f64> {
    let n = ds.len();
    let marks = ds.marks();
    let mut col = vec![0.0; n];
    match ind {
        Indicator::LogReturn { lag } => {
            for t in *lag..n {
                col[t] = (marks[t] / marks[t - lag]).ln();
            }
        }
        Indicator::EmaRatio { period } => {
            let alpha = 2.0 / (*period as f64 + 1.0);
            let mut ema = marks[0];
            for t in 0..n {
                ema += alpha * (marks[t] - ema);
                col[t] = ema / marks[t] - 1.0;
            }
        }
        Indicator::RollingVol { window } => {
            let rets: Vec<f64> =
                (1..n).map(|t| (marks[t] / marks[t - 1]).ln()).collect();
            for t in *window..n {
                let slice = &rets[t - window..t];
                let m = slice.iter().sum::<f64>() / *window as f64;
                let var =
                    slice.iter().map(|r| (r - m).powi(2)).sum::<f64>() / *window as f64;
                col[t] = var.sqrt();
            }
        }
        Indicator::LobImbalance => {
            for t in 0..n {
                let bid: f64 = ds.lob[t].bids.iter().map(|&(_, q)| q).sum();
                let ask: f64 = ds.lob[t].asks.iter().map(|&(_, q)| q).sum();
                col[t] = bid / (bid + ask);
            }
        }
        Indicator::RelativeSpread => {
            for t in 0..n {
                col[t] = (ds.lob[t].best_ask() - ds.lob[t].best_bid()) / marks[t];
            }
        }
        Indicator::VolumeZScore { window } => {
            let vol: Vec<f64> = ds
                .trades
                .iter()
                .map(|trades| trades.iter().map(|tr| tr.qty).sum())
                .collect();
            for t in (window - 1)..n {
                let slice = &vol[t + 1 - window..=t];
                let m = slice.iter().sum::<f64>() / *window as f64;
                let var =
                    slice.iter().map(|v| (v - m).powi(2)).sum::<f64>() / *window as f64;
                let std = var.sqrt();
                col[t] = if std > 0.0 { (vol[t] - m) / std } else { 0.0 };
            }
        }
    }
    col
}
