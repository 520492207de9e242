//! Regime-switching synthetic market generator.
//!
//! The mark price follows a geometric random walk whose drift/volatility are
//! set by the active regime; regimes cycle in listed order with random
//! durations. Books are synthesized around the mark with a configurable
//! relative spread and per-level offset, and funding rates are emitted on a
//! fixed period. The generator is a pure function of `(cfg, seed)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, LobSnapshot, MarkPoint, Side, TradeRecord};
use crate::error::{CoreError, Result};

/// One market regime: per-step log drift and volatility plus a uniform
/// integer duration range (bars) sampled on each visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub name: String,
    pub drift: f64,
    pub vol: f64,
    pub min_duration: usize,
    pub max_duration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCfg {
    pub steps: usize,
    /// Bar width in seconds (5-minute default).
    pub bar_seconds: u64,
    pub start_ts: u64,
    pub initial_mark: f64,
    /// Relative bid/ask spread around the mark; must be positive.
    pub spread: f64,
    /// Relative price offset per additional book level; must be positive.
    pub level_tick: f64,
    pub depth: usize,
    /// Mean resting qty per level; actual qty is uniform in ±50% of this.
    pub level_qty: f64,
    pub trades_per_bar: usize,
    /// Funding settlement period in seconds (8 hours default).
    pub funding_period_s: u64,
    /// Rate emitted at each settlement timestamp.
    pub funding_rate: f64,
    pub regimes: Vec<RegimeSpec>,
}

impl Default for SyntheticCfg {
    fn default() -> SyntheticCfg {
        SyntheticCfg {
            steps: 20_000,
            bar_seconds: 300,
            start_ts: 1_600_000_000,
            initial_mark: 30_000.0,
            spread: 2e-4,
            level_tick: 1e-4,
            depth: 5,
            level_qty: 50.0,
            trades_per_bar: 3,
            funding_period_s: 28_800,
            funding_rate: 1e-4,
            regimes: vec![
                RegimeSpec {
                    name: "bull".into(),
                    drift: 1e-4,
                    vol: 1e-3,
                    min_duration: 2000,
                    max_duration: 4000,
                },
                RegimeSpec {
                    name: "bear".into(),
                    drift: -1e-4,
                    vol: 1e-3,
                    min_duration: 2000,
                    max_duration: 4000,
                },
            ],
        }
    }
}

impl SyntheticCfg {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(CoreError::InvalidConfig("synthetic.steps must be at least 2".into()));
        }
        if self.regimes.is_empty() {
            return Err(CoreError::InvalidConfig("synthetic.regimes must be non-empty".into()));
        }
        // Volatility 0 is allowed (degenerate constant-price market); negative
        // volatility and a non-positive spread are not.
        for r in &self.regimes {
            if r.vol < 0.0 {
                return Err(CoreError::InvalidConfig(format!(
                    "regime '{}' has negative volatility",
                    r.name
                )));
            }
            if r.min_duration == 0 || r.max_duration < r.min_duration {
                return Err(CoreError::InvalidConfig(format!(
                    "regime '{}' has an invalid duration range",
                    r.name
                )));
            }
        }
        if !(self.spread > 0.0) {
            return Err(CoreError::InvalidConfig("synthetic.spread must be positive".into()));
        }
        if !(self.level_tick > 0.0) {
            return Err(CoreError::InvalidConfig("synthetic.level_tick must be positive".into()));
        }
        if !(self.initial_mark > 0.0) || self.depth == 0 || !(self.level_qty > 0.0) {
            return Err(CoreError::InvalidConfig(
                "synthetic mark, depth, and level_qty must be positive".into(),
            ));
        }
        if self.bar_seconds == 0 || self.funding_period_s == 0 {
            return Err(CoreError::InvalidConfig(
                "synthetic.bar_seconds and funding_period_s must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn generate_synthetic(cfg: &SyntheticCfg, seed: u64) -> Result<Dataset> {
    generate_synthetic_with_truth(cfg, seed).map(|(ds, _)| ds)
}

/// Like [`generate_synthetic`] but also returns the true regime index per bar,
/// for tests and diagnostics that need ground truth.
pub fn generate_synthetic_with_truth(
    cfg: &SyntheticCfg,
    seed: u64,
) -> Result<(Dataset, Vec<usize>)> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut ds = Dataset::default();
    let mut truth = Vec::with_capacity(cfg.steps);

    let mut regime_idx = 0usize;
    let mut remaining = sample_duration(&cfg.regimes[0], &mut rng);
    let mut log_mark = cfg.initial_mark.ln();

    for step in 0..cfg.steps {
        if remaining == 0 {
            regime_idx = (regime_idx + 1) % cfg.regimes.len();
            remaining = sample_duration(&cfg.regimes[regime_idx], &mut rng);
        }
        remaining -= 1;
        truth.push(regime_idx);

        let ts = cfg.start_ts + step as u64 * cfg.bar_seconds;
        let mark = log_mark.exp();

        let mut bids = Vec::with_capacity(cfg.depth);
        let mut asks = Vec::with_capacity(cfg.depth);
        for level in 0..cfg.depth {
            let off = cfg.spread / 2.0 + level as f64 * cfg.level_tick;
            let bid_qty = cfg.level_qty * rng.gen_range(0.5..1.5);
            let ask_qty = cfg.level_qty * rng.gen_range(0.5..1.5);
            bids.push((mark * (1.0 - off), bid_qty));
            asks.push((mark * (1.0 + off), ask_qty));
        }

        let mut trades = Vec::with_capacity(cfg.trades_per_bar);
        for _ in 0..cfg.trades_per_bar {
            let price = mark * (1.0 + rng.gen_range(-cfg.spread / 2.0..=cfg.spread / 2.0));
            let qty = cfg.level_qty * rng.gen_range(0.05..0.5);
            let side = if rng.gen_bool(0.5) { Side::Buy } else { Side::Sell };
            trades.push(TradeRecord { ts, price, qty, side });
        }

        let offset = (ts - cfg.start_ts) % cfg.funding_period_s;
        let funding_rate = if offset == 0 { cfg.funding_rate } else { 0.0 };
        let seconds_to_funding = cfg.funding_period_s - offset;

        ds.lob.push(LobSnapshot { ts, bids, asks });
        ds.trades.push(trades);
        ds.mark.push(MarkPoint { ts, mark, funding_rate, seconds_to_funding });

        let regime = &cfg.regimes[regime_idx];
        let eps: f64 = StandardNormal.sample(&mut rng);
        log_mark += regime.drift + regime.vol * eps;
    }

    ds.validate()?;
    Ok((ds, truth))
}

fn sample_duration(regime: &RegimeSpec, rng: &mut ChaCha20Rng) -> usize {
    rng.gen_range(regime.min_duration..=regime.max_duration)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticCfg {
        SyntheticCfg {
            steps: 500,
            regimes: vec![
                RegimeSpec {
                    name: "up".into(),
                    drift: 1e-4,
                    vol: 1e-3,
                    min_duration: 50,
                    max_duration: 100,
                },
                RegimeSpec {
                    name: "down".into(),
                    drift: -1e-4,
                    vol: 1e-3,
                    min_duration: 50,
                    max_duration: 100,
                },
            ],
            ..SyntheticCfg::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = small_cfg();
        let a = generate_synthetic(&cfg, 7).unwrap();
        let b = generate_synthetic(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_drift_zero_vol_is_constant() {
        let cfg = SyntheticCfg {
            steps: 100,
            regimes: vec![RegimeSpec {
                name: "flat".into(),
                drift: 0.0,
                vol: 0.0,
                min_duration: 10,
                max_duration: 10,
            }],
            ..SyntheticCfg::default()
        };
        let ds = generate_synthetic(&cfg, 1).unwrap();
        let marks = ds.marks();
        assert!(marks.iter().all(|&m| (m - marks[0]).abs() < 1e-12));
    }

    #[test]
    fn negative_vol_and_bad_spread_rejected() {
        let mut cfg = small_cfg();
        cfg.regimes[0].vol = -1e-3;
        assert!(generate_synthetic(&cfg, 1).is_err());
        let mut cfg = small_cfg();
        cfg.spread = 0.0;
        assert!(generate_synthetic(&cfg, 1).is_err());
    }

    #[test]
    fn per_regime_mean_log_return_tracks_drift() {
        let mut cfg = small_cfg();
        cfg.steps = 20_000;
        cfg.regimes[0].drift = 1e-4;
        cfg.regimes[1].drift = -1e-4;
        let (ds, truth) = generate_synthetic_with_truth(&cfg, 3).unwrap();
        let marks = ds.marks();
        for (regime, want) in [(0usize, 1e-4), (1usize, -1e-4)] {
            // Log return at step t belongs to the regime active at t.
            let rets: Vec<f64> = (0..marks.len() - 1)
                .filter(|&t| truth[t] == regime)
                .map(|t| (marks[t + 1] / marks[t]).ln())
                .collect();
            let n = rets.len() as f64;
            let mean = rets.iter().sum::<f64>() / n;
            let var = rets.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            let stderr = (var / n).sqrt();
            assert!(
                (mean - want).abs() <= 3.0 * stderr,
                "regime {regime}: mean {mean} vs drift {want} (stderr {stderr})"
            );
        }
    }

    #[test]
    fn funding_emitted_on_period() {
        let cfg = small_cfg();
        let ds = generate_synthetic(&cfg, 2).unwrap();
        let period_bars = (cfg.funding_period_s / cfg.bar_seconds) as usize;
        for (i, m) in ds.mark.iter().enumerate() {
            if i % period_bars == 0 {
                assert_eq!(m.funding_rate, cfg.funding_rate, "bar {i}");
                assert_eq!(m.seconds_to_funding, cfg.funding_period_s);
            } else {
                assert_eq!(m.funding_rate, 0.0, "bar {i}");
            }
        }
    }
}
