//! Performance metrics computed from an equity curve.
//!
//! Daily returns are sampled from the margin-balance series at fixed bar
//! boundaries (`bars_per_day`), annualized with a 365-day year. Ratios whose
//! denominator is empty or zero (no variance, no drawdown, no losing trades)
//! are reported as `None` rather than an infinity.

use serde::{Deserialize, Serialize};

use super::EquityCurve;
use crate::error::{CoreError, Result};

/// Trading days per year used for annualization.
pub const DAYS_PER_YEAR: f64 = 365.0;

/// Summary statistics for one backtest run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fractional change of margin balance over the run.
    pub total_return: f64,
    /// Population std of daily returns, annualized.
    pub annual_volatility: f64,
    /// Mean/std of daily returns, annualized; `None` when variance is zero.
    pub annual_sharpe: Option<f64>,
    /// Annualized mean daily return over max drawdown; `None` when flat.
    pub annual_calmar: Option<f64>,
    /// Annualized mean over downside deviation; `None` without losing days.
    pub annual_sortino: Option<f64>,
    /// Largest peak-to-trough loss fraction along the full curve, in [0, 1].
    pub max_drawdown: f64,
    /// Total traded volume divided by the position cap.
    pub turnover: f64,
    /// Number of transitions from a held position to flat (round trips).
    pub trades_to_none: u64,
    /// Number of steps where the held position changed.
    pub trade_transitions: u64,
    /// Fraction of closed trades with positive PnL; `None` without trades.
    pub win_rate: Option<f64>,
    /// Gross profits over gross losses; `None` without losing trades.
    pub reward_risk_ratio: Option<f64>,
    /// Average win over average loss; `None` unless both sides exist.
    pub avg_reward_risk: Option<f64>,
    /// Environment steps in the run.
    pub steps: u64,
    /// Number of equity samples used for daily returns.
    pub daily_samples: u64,
    /// Whether a forced liquidation occurred during the run.
    pub liquidated: bool,
    /// Wall-clock duration of the run, when measured by the caller.
    pub runtime_seconds: Option<f64>,
}

/// Population standard deviation; 0 for a single observation.
fn pop_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    var.sqrt()
}

/// Compute all summary statistics for `curve`, sampling daily returns every
/// `bars_per_day` points (the final value is always included as a sample).
pub fn compute_metrics(curve: &EquityCurve, bars_per_day: usize) -> Result<MetricsReport> {
    if bars_per_day == 0 {
        return Err(CoreError::InvalidConfig("bars_per_day must be positive".into()));
    }
    let values = curve.values();
    if values.len() < 2 {
        return Err(CoreError::InvalidData(
            "equity curve needs at least one step to compute metrics".into(),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("equity curve contains a non-finite value".into()));
    }
    if values[0] <= 0.0 {
        return Err(CoreError::InvalidData("initial margin balance must be positive".into()));
    }

    let total_return = (values[values.len() - 1] - values[0]) / values[0];

    // Daily samples: every bars_per_day-th point plus the final value.
    let mut samples: Vec<f64> = values.iter().step_by(bars_per_day).copied().collect();
    if (values.len() - 1) % bars_per_day != 0 {
        samples.push(values[values.len() - 1]);
    }
    let mut rets = Vec::with_capacity(samples.len() - 1);
    for w in samples.windows(2) {
        if w[0] <= 0.0 {
            return Err(CoreError::InvalidData(
                "margin balance hit zero; daily returns are undefined".into(),
            ));
        }
        rets.push((w[1] - w[0]) / w[0]);
    }

    let mean = rets.iter().sum::<f64>() / rets.len() as f64;
    let sigma = pop_std(&rets);
    let annual_volatility = sigma * DAYS_PER_YEAR.sqrt();
    let annual_sharpe =
        (sigma > 0.0).then(|| mean / sigma * DAYS_PER_YEAR.sqrt());

    // Max drawdown over the full-resolution curve; equity below zero caps the
    // loss fraction at 100% of the peak.
    let mut peak = values[0];
    let mut max_drawdown = 0.0f64;
    for &v in &values {
        peak = peak.max(v);
        max_drawdown = max_drawdown.max((peak - v) / peak);
    }
    max_drawdown = max_drawdown.min(1.0);
    let annual_calmar = (max_drawdown > 0.0).then(|| mean * DAYS_PER_YEAR / max_drawdown);

    let downside: Vec<f64> = rets.iter().copied().filter(|r| *r < 0.0).collect();
    let dd = pop_std(&downside);
    let annual_sortino =
        (!downside.is_empty() && dd > 0.0).then(|| mean * DAYS_PER_YEAR.sqrt() / dd);

    // Position-path statistics at full resolution.
    let positions = curve.positions();
    let mut traded = 0.0;
    let mut trade_transitions = 0u64;
    let mut trades_to_none = 0u64;
    for w in positions.windows(2) {
        let delta = w[1] - w[0];
        traded += delta.abs();
        if delta != 0.0 {
            trade_transitions += 1;
        }
        if w[0] != 0.0 && w[1] == 0.0 {
            trades_to_none += 1;
        }
    }
    if !(curve.h_max > 0.0) {
        return Err(CoreError::InvalidData("position cap must be positive".into()));
    }
    let turnover = traded / curve.h_max;

    // Per-trade statistics from fully closed trades.
    let wins: Vec<f64> = curve.trades.iter().map(|t| t.pnl).filter(|p| *p > 0.0).collect();
    let losses: Vec<f64> = curve.trades.iter().map(|t| t.pnl).filter(|p| *p < 0.0).collect();
    let win_rate = (!curve.trades.is_empty())
        .then(|| wins.len() as f64 / curve.trades.len() as f64);
    let gross_win: f64 = wins.iter().sum();
    let gross_loss: f64 = losses.iter().map(|p| p.abs()).sum();
    let reward_risk_ratio = (gross_loss > 0.0).then(|| gross_win / gross_loss);
    let avg_reward_risk = (!wins.is_empty() && !losses.is_empty())
        .then(|| (gross_win / wins.len() as f64) / (gross_loss / losses.len() as f64));

    Ok(MetricsReport {
        total_return,
        annual_volatility,
        annual_sharpe,
        annual_calmar,
        annual_sortino,
        max_drawdown,
        turnover,
        trades_to_none,
        trade_transitions,
        win_rate,
        reward_risk_ratio,
        avg_reward_risk,
        steps: curve.points.len() as u64,
        daily_samples: samples.len() as u64,
        liquidated: curve.liquidated,
        runtime_seconds: None,
    })
}
