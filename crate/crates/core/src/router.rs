//! EMA-smoothed regime scoring and risk-aware policy dispatch.
//!
//! Each step, every fitted dynamic scores the recent market-state window
//! through its VAE's ECDF; the per-step scores are EMA-combined into one
//! window score per dynamic. The best-scoring dynamic's policy trades —
//! unless even the best score is at or below the reject threshold, in which
//! case an unfamiliar market is assumed and a conservative stop-loss policy
//! (which only ever holds or closes) takes over.

use serde::{Deserialize, Serialize};

use crate::env::{Account, ActionSpace};
use crate::error::{CoreError, Result};
use crate::ood::RegimeModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    /// EMA decay in (0, 1).
    pub gamma: f64,
    /// Number of recent states scored per decision.
    pub window: usize,
    /// Reject threshold: a winning score at or below it goes conservative.
    pub tau: f64,
    /// Per-trade drawdown fraction beyond which the conservative policy
    /// closes the position.
    pub drawdown: f64,
}

impl Default for RouterConfig {
    fn default() -> RouterConfig {
        RouterConfig { gamma: 0.99, window: 60, tau: 0.5, drawdown: 0.05 }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "EMA decay must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if self.window == 0 {
            return Err(CoreError::InvalidConfig("score window must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(CoreError::InvalidConfig(format!(
                "reject threshold must lie in [0, 1], got {}",
                self.tau
            )));
        }
        if !(self.drawdown >= 0.0 && self.drawdown.is_finite()) {
            return Err(CoreError::InvalidConfig(format!(
                "drawdown threshold must be non-negative, got {}",
                self.drawdown
            )));
        }
        Ok(())
    }
}

/// EMA over a window of per-step scores, oldest first: seeded with the first
/// score, then `Re ← γ·Re + R_t` for each later step. The weights do not sum
/// to one, so the result is not bounded by the per-step score range.
pub fn ema_window_score(window: &[f64], gamma: f64) -> f64 {
    assert!(!window.is_empty(), "EMA window must be non-empty");
    let mut re = window[0];
    for &r in &window[1..] {
        re = gamma * re + r;
    }
    re
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouteChoice {
    /// Trade with the policy of this dynamic.
    Policy(usize),
    /// Hold-or-close stop-loss policy.
    Conservative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteDecision {
    pub choice: RouteChoice,
    /// Dynamic with the highest EMA window score (ties to the lowest id).
    pub winning_dynamic: usize,
    pub winning_score: f64,
    /// EMA window score of every dynamic.
    pub scores: Vec<f64>,
    /// True when fewer than `window` states were available.
    pub truncated: bool,
}

/// Decide from per-step score windows, one inner vector per dynamic (oldest
/// first, all the same length). The winning dynamic's policy is chosen unless
/// its score is at or below `tau`.
pub fn route_scored(score_windows: &[Vec<f64>], cfg: &RouterConfig) -> Result<RouteDecision> {
    cfg.validate()?;
    if score_windows.is_empty() {
        return Err(CoreError::InvalidConfig("no dynamics to route over".into()));
    }
    let len = score_windows[0].len();
    if len == 0 || score_windows.iter().any(|w| w.len() != len) {
        return Err(CoreError::InvalidConfig(
            "score windows must be non-empty and equally long".into(),
        ));
    }
    let scores: Vec<f64> =
        score_windows.iter().map(|w| ema_window_score(w, cfg.gamma)).collect();
    let mut winning_dynamic = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[winning_dynamic] {
            winning_dynamic = i;
        }
    }
    let winning_score = scores[winning_dynamic];
    let choice = if winning_score <= cfg.tau {
        RouteChoice::Conservative
    } else {
        RouteChoice::Policy(winning_dynamic)
    };
    Ok(RouteDecision {
        choice,
        winning_dynamic,
        winning_score,
        scores,
        truncated: len < cfg.window,
    })
}

/// Score a window of recent market states (oldest first) against every
/// dynamic's model and decide. A window shorter than `cfg.window` is scored
/// as-is and flagged `truncated`.
pub fn route(
    window_states: &[Vec<f64>],
    models: &[RegimeModel],
    cfg: &RouterConfig,
) -> Result<RouteDecision> {
    if models.is_empty() {
        return Err(CoreError::InvalidConfig("no dynamics to route over".into()));
    }
    if window_states.is_empty() {
        return Err(CoreError::InvalidConfig("cannot route on an empty state window".into()));
    }
    let score_windows: Vec<Vec<f64>> = models
        .iter()
        .map(|m| window_states.iter().map(|y| m.score(y)).collect::<Result<Vec<f64>>>())
        .collect::<Result<_>>()?;
    route_scored(&score_windows, cfg)
}

/// Stop-loss policy: stay flat when flat; close when the current trade has
/// drawn down more than `threshold` of its entry margin balance; otherwise
/// hold the current position. Never opens or grows a position and never
/// changes leverage.
pub fn conservative_action(
    acct: &Account,
    mark: f64,
    space: &ActionSpace,
    threshold: f64,
) -> usize {
    if acct.position == 0.0 {
        return 0;
    }
    let v = acct.margin_balance(mark);
    let base = acct.trade_open_mb;
    let drawdown = if base > 0.0 { (acct.trade_peak_mb - v) / base } else { f64::INFINITY };
    if drawdown > threshold {
        0
    } else {
        space.hold_index(acct.position, acct.leverage)
    }
}
