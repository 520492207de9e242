//! Grid search over router parameters on a validation range.
//!
//! Per-state regime scores are precomputed once (the expensive VAE pass) and
//! every `(gamma, window, tau)` combination re-runs only the cheap EMA
//! routing and environment rollout. Scoring noise is a pure function of the
//! model's evaluation seed and the state, so precomputed scores are bit-equal
//! to the ones [`RoutedPolicy`](super::RoutedPolicy) computes on the fly —
//! the chosen configuration replays identically in the final backtest.

use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{backtest, compute_metrics, Policy, PolicyCtx};
use crate::ensemble::argmax;
use crate::env::{EnvCfg, FuturesEnv};
use crate::error::{CoreError, Result};
use crate::market_data::Dataset;
use crate::nn::Mlp;
use crate::ood::RegimeModel;
use crate::router::{conservative_action, route_scored, RouteChoice, RouterConfig};

/// Candidate axes for the router grid search. Every combination of
/// `gammas × windows × taus` is evaluated; `drawdown` is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneGrid {
    pub gammas: Vec<f64>,
    pub windows: Vec<usize>,
    pub taus: Vec<f64>,
    pub drawdown: f64,
}

impl Default for TuneGrid {
    fn default() -> TuneGrid {
        TuneGrid {
            gammas: vec![0.9, 0.97, 0.99],
            windows: vec![30, 60, 240],
            taus: vec![0.25, 0.5, 0.75],
            drawdown: 0.05,
        }
    }
}

impl TuneGrid {
    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() || self.windows.is_empty() || self.taus.is_empty() {
            return Err(CoreError::InvalidConfig("tuning grid axes must be non-empty".into()));
        }
        // Each candidate is validated as a full RouterConfig below; this only
        // catches axes that could silently produce an empty product.
        Ok(())
    }

    /// All candidate configurations in grid order: gamma outermost, then
    /// window, then tau.
    pub fn candidates(&self) -> Vec<RouterConfig> {
        let mut out = Vec::with_capacity(self.gammas.len() * self.windows.len() * self.taus.len());
        for &gamma in &self.gammas {
            for &window in &self.windows {
                for &tau in &self.taus {
                    out.push(RouterConfig { gamma, window, tau, drawdown: self.drawdown });
                }
            }
        }
        out
    }
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunePoint {
    pub cfg: RouterConfig,
    /// Validation objective: annualized Calmar ratio, with a flat curve
    /// scored +inf when profitable and 0 otherwise.
    pub objective: f64,
    pub total_return: f64,
    pub max_drawdown: f64,
}

/// Outcome of [`tune_router`]: the winning configuration and the full grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: RouterConfig,
    pub grid: Vec<TunePoint>,
}

/// Routed policy over a precomputed score matrix. Mirrors
/// [`RoutedPolicy`](super::RoutedPolicy) exactly, minus the VAE evaluation.
struct ScoredRouterPolicy<'a> {
    /// `scores[d][k]` is dynamic `d`'s score for bar `offset + k`.
    scores: &'a [Vec<f64>],
    offset: usize,
    nets: &'a [Mlp],
    cfg: RouterConfig,
    warmup: usize,
}

impl Policy for ScoredRouterPolicy<'_> {
    fn name(&self) -> String {
        "tune_candidate".into()
    }

    fn decide(&mut self, ctx: &PolicyCtx) -> Result<usize> {
        let lo = (ctx.t + 1).saturating_sub(self.cfg.window).max(self.warmup);
        if lo < self.offset || ctx.t + 1 - self.offset > self.scores[0].len() {
            return Err(CoreError::InvalidData(format!(
                "precomputed scores do not cover bar {}",
                ctx.t
            )));
        }
        let windows: Vec<Vec<f64>> = self
            .scores
            .iter()
            .map(|row| row[lo - self.offset..=ctx.t - self.offset].to_vec())
            .collect();
        let decision = route_scored(&windows, &self.cfg)?;
        Ok(match decision.choice {
            RouteChoice::Policy(d) => argmax(&self.nets[d].forward(ctx.features)),
            RouteChoice::Conservative => {
                conservative_action(ctx.account, ctx.mark, ctx.space, self.cfg.drawdown)
            }
        })
    }
}

/// Calmar-based tuning objective with sentinel handling for flat curves.
fn objective_of(total_return: f64, calmar: Option<f64>) -> f64 {
    match calmar {
        Some(c) => c,
        None if total_return > 0.0 => f64::INFINITY,
        None => 0.0,
    }
}

/// Score every candidate router configuration by rolling the routed policy
/// over `range` and ranking by Calmar ratio. Ties keep the earliest grid
/// point (gamma outermost, then window, then tau).
pub fn tune_router(
    models: &[RegimeModel],
    nets: &[Mlp],
    ds: &Dataset,
    range: Range<usize>,
    env_cfg: &EnvCfg,
    grid: &TuneGrid,
    bars_per_day: usize,
) -> Result<TuneOutcome> {
    grid.validate()?;
    if models.is_empty() || models.len() != nets.len() {
        return Err(CoreError::InvalidConfig(
            "tuning needs one value network per regime model".into(),
        ));
    }
    let candidates = grid.candidates();
    for cfg in &candidates {
        cfg.validate()?;
    }
    let start_eff = range.start.max(ds.warmup);
    if range.end > ds.len() || start_eff + 2 > range.end {
        return Err(CoreError::InvalidConfig(format!(
            "validation range {}..{} is too short to roll out",
            range.start, range.end
        )));
    }
    if ds.states.len() < range.end {
        return Err(CoreError::InvalidData(
            "routing needs indicator states for every bar in the range".into(),
        ));
    }

    // Score once per (dynamic, bar): decisions happen on bars
    // start_eff ..= range.end - 2, and the widest window reaches back
    // window - 1 bars further (never before warmup).
    let max_window = *grid.windows.iter().max().expect("validated non-empty");
    let offset = (start_eff + 1).saturating_sub(max_window).max(ds.warmup);
    let scores: Vec<Vec<f64>> = models
        .par_iter()
        .map(|m| {
            ds.states[offset..range.end - 1]
                .iter()
                .map(|s| m.score(&s.indicators))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("tune-router scoring"))?;

    let grid_points: Vec<TunePoint> = candidates
        .par_iter()
        .map(|&cfg| -> Result<TunePoint> {
            let mut env = FuturesEnv::new(ds, range.clone(), env_cfg.clone())?;
            env.reset();
            let mut policy =
                ScoredRouterPolicy { scores: &scores, offset, nets, cfg, warmup: ds.warmup };
            let curve = backtest(&mut env, &mut policy)?;
            let m = compute_metrics(&curve, bars_per_day)?;
            Ok(TunePoint {
                cfg,
                objective: objective_of(m.total_return, m.annual_calmar),
                total_return: m.total_return,
                max_drawdown: m.max_drawdown,
            })
        })
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("tune-router rollout"))?;

    let mut best = 0;
    for (i, p) in grid_points.iter().enumerate() {
        if p.objective > grid_points[best].objective {
            best = i;
        }
    }
    Ok(TuneOutcome { best: grid_points[best].cfg, grid: grid_points })
}

/// Write the evaluated grid as
/// `gamma,window,tau,drawdown,objective,total_return,max_drawdown`.
pub fn write_tune_csv(outcome: &TuneOutcome, path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| CoreError::InvalidData(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["gamma", "window", "tau", "drawdown", "objective", "total_return", "max_drawdown"])
        .map_err(csv_err)?;
    for p in &outcome.grid {
        w.write_record([
            format!("{:e}", p.cfg.gamma),
            p.cfg.window.to_string(),
            format!("{:e}", p.cfg.tau),
            format!("{:e}", p.cfg.drawdown),
            format!("{:e}", p.objective),
            format!("{:e}", p.total_return),
            format!("{:e}", p.max_drawdown),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backtest::tests::{
        drift_marks, pin_net_to_action, pinned_model, small_cfg, with_states,
    };
    use crate::backtest::RoutedPolicy;
    use crate::env::tests::dataset_from_marks;

    fn rising_fixture() -> Dataset {
        with_states(dataset_from_marks(&drift_marks(100.0, 0.4, 80), 0.05, 1_000.0))
    }

    fn specialists(space_size: usize, long_idx: usize) -> Vec<Mlp> {
        let mut flat = Mlp::new(&[6, 4, space_size], 1);
        let mut long = Mlp::new(&[6, 4, space_size], 2);
        pin_net_to_action(&mut flat, 0);
        pin_net_to_action(&mut long, long_idx);
        vec![flat, long]
    }

    #[test]
    fn grid_candidates_enumerate_in_order() {
        let grid = TuneGrid {
            gammas: vec![0.9, 0.99],
            windows: vec![10, 20],
            taus: vec![0.3],
            drawdown: 0.05,
        };
        let c = grid.candidates();
        assert_eq!(c.len(), 4);
        assert_eq!((c[0].gamma, c[0].window), (0.9, 10));
        assert_eq!((c[1].gamma, c[1].window), (0.9, 20));
        assert_eq!((c[2].gamma, c[2].window), (0.99, 10));
        assert!(c.iter().all(|cfg| cfg.tau == 0.3 && cfg.drawdown == 0.05));
    }

    #[test]
    fn tuning_prefers_the_profitable_threshold() {
        let ds = rising_fixture();
        let cfg = small_cfg();
        let long_idx = cfg.space.index_of(2.0, 5).unwrap();
        // Dynamic 1 (max long) always scores 1, dynamic 0 scores 0. With
        // u = 1 the window score is exactly 1: tau = 1 rejects every step
        // (flat, objective 0) while tau = 0.5 trades long all the way.
        let models = vec![pinned_model(0, 0.0), pinned_model(1, 1.0)];
        let nets = specialists(cfg.space.size(), long_idx);
        let grid = TuneGrid {
            gammas: vec![0.99],
            windows: vec![1],
            taus: vec![1.0, 0.5],
            drawdown: 0.05,
        };
        let out = tune_router(&models, &nets, &ds, 0..80, &cfg, &grid, 288).unwrap();
        assert_eq!(out.grid.len(), 2);
        assert_eq!(out.best.tau, 0.5);
        let rejected = &out.grid[0];
        assert_eq!(rejected.cfg.tau, 1.0);
        assert_eq!(rejected.total_return, 0.0);
        assert_eq!(rejected.objective, 0.0);
        let traded = &out.grid[1];
        assert!(traded.total_return > 0.0);
        assert!(traded.objective > 0.0 || traded.objective.is_infinite());
    }

    #[test]
    fn ties_keep_the_earliest_grid_point() {
        let ds = rising_fixture();
        let cfg = small_cfg();
        let long_idx = cfg.space.index_of(2.0, 5).unwrap();
        let models = vec![pinned_model(0, 0.0), pinned_model(1, 1.0)];
        let nets = specialists(cfg.space.size(), long_idx);
        // Both taus admit the winning score of 1; every rollout is identical.
        let grid = TuneGrid {
            gammas: vec![0.9, 0.99],
            windows: vec![1],
            taus: vec![0.25, 0.5],
            drawdown: 0.05,
        };
        let out = tune_router(&models, &nets, &ds, 0..80, &cfg, &grid, 288).unwrap();
        assert_eq!(out.grid.len(), 4);
        let first = out.grid[0].objective;
        assert!(out.grid.iter().all(|p| p.objective == first), "all rollouts identical");
        assert_eq!(out.best, out.grid[0].cfg);
    }

    #[test]
    fn best_candidate_replays_identically_in_the_routed_policy() {
        let ds = rising_fixture();
        let cfg = small_cfg();
        let long_idx = cfg.space.index_of(2.0, 5).unwrap();
        let models = vec![pinned_model(0, 0.0), pinned_model(1, 1.0)];
        let nets = specialists(cfg.space.size(), long_idx);
        let grid = TuneGrid {
            gammas: vec![0.97],
            windows: vec![4],
            taus: vec![0.5],
            drawdown: 0.05,
        };
        let out = tune_router(&models, &nets, &ds, 0..80, &cfg, &grid, 288).unwrap();

        let mut env = FuturesEnv::new(&ds, 0..80, cfg.clone()).unwrap();
        env.reset();
        let mut policy = RoutedPolicy::new(models, nets, out.best, true).unwrap();
        let curve = backtest(&mut env, &mut policy).unwrap();
        let m = compute_metrics(&curve, 288).unwrap();
        let replay = objective_of(m.total_return, m.annual_calmar);
        assert_eq!(replay, out.grid[0].objective, "tuned rollout and replay agree exactly");
        assert_eq!(m.total_return, out.grid[0].total_return);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let ds = rising_fixture();
        let cfg = small_cfg();
        let models = vec![pinned_model(0, 1.0)];
        let nets = vec![Mlp::new(&[6, 4, cfg.space.size()], 1)];
        let empty = TuneGrid { gammas: vec![], ..TuneGrid::default() };
        assert!(tune_router(&models, &nets, &ds, 0..80, &cfg, &empty, 288).is_err());
        let grid = TuneGrid::default();
        assert!(tune_router(&models, &[], &ds, 0..80, &cfg, &grid, 288).is_err());
        assert!(
            tune_router(&models, &nets, &ds, 0..1, &cfg, &grid, 288).is_err(),
            "range too short"
        );
    }

    #[test]
    fn paper_grid_values_parse_and_run() {
        // The published per-market configurations must be representable.
        for (gamma, window, tau) in
            [(0.94, 134, 0.37), (0.99, 60, 0.50), (0.97, 63, 0.76), (0.99, 240, 0.50)]
        {
            let cfg = RouterConfig { gamma, window, tau, drawdown: 0.05 };
            cfg.validate().unwrap();
        }
        let ds = rising_fixture();
        let cfg = small_cfg();
        let long_idx = cfg.space.index_of(2.0, 5).unwrap();
        let models = vec![pinned_model(0, 0.0), pinned_model(1, 1.0)];
        let nets = specialists(cfg.space.size(), long_idx);
        let grid = TuneGrid {
            gammas: vec![0.94, 0.99],
            windows: vec![60, 134],
            taus: vec![0.37, 0.5],
            drawdown: 0.05,
        };
        let out = tune_router(&models, &nets, &ds, 0..80, &cfg, &grid, 288).unwrap();
        assert_eq!(out.grid.len(), 8);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tune.csv");
        write_tune_csv(&out, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 9);
        assert!(text.starts_with("gamma,window,tau,drawdown,objective,total_return,max_drawdown"));
    }
}
