//! Greedy policy evaluation on the trading environment.
//!
//! A [`Policy`] maps the current observation to an action index; [`backtest`]
//! rolls it through a [`FuturesEnv`] episode and records the margin-balance
//! path, every fully closed trade, and per-step costs as an [`EquityCurve`].
//! [`filter_ensemble`] scores every learner on every labeled market segment to
//! pick one specialist per dynamic, and [`RoutedPolicy`] dispatches between
//! those specialists (or a stop-loss fallback) from regime-model scores.

mod metrics;
mod tune;

pub use metrics::{compute_metrics, MetricsReport, DAYS_PER_YEAR};
pub use tune::{tune_router, write_tune_csv, TuneGrid, TuneOutcome, TunePoint};

use std::path::Path;

use rayon::prelude::*;

use crate::ensemble::{argmax, Ensemble};
use crate::env::{Account, ActionSpace, ClosedTrade, EnvCfg, FuturesEnv};
use crate::error::{CoreError, Result};
use crate::market_data::Dataset;
use crate::nn::Mlp;
use crate::ood::RegimeModel;
use crate::router::{conservative_action, route, RouteChoice, RouterConfig};
use crate::segment::Segment;

/// Everything a policy may look at when choosing an action. Borrowed views
/// into the environment at the decision step; `t` indexes the dataset bar the
/// decision is made on.
pub struct PolicyCtx<'a> {
    /// Feature vector of the current observation (indicators + position +
    /// funding countdown), as fed to the learners.
    pub features: &'a [f64],
    pub account: &'a Account,
    /// Mark price at the decision bar.
    pub mark: f64,
    pub space: &'a ActionSpace,
    pub ds: &'a Dataset,
    /// Absolute dataset index of the decision bar.
    pub t: usize,
    /// Timestamp of the decision bar.
    pub ts: u64,
}

/// An action-selection rule evaluated by [`backtest`].
pub trait Policy {
    /// Stable label used to name artifacts for this policy's runs.
    fn name(&self) -> String;
    /// Pick an action index for the current step.
    fn decide(&mut self, ctx: &PolicyCtx) -> Result<usize>;
    /// Clear any per-episode state before a fresh rollout.
    fn reset(&mut self) {}
}

/// Greedy argmax over one value network's outputs.
pub struct LearnerPolicy {
    net: Mlp,
    label: String,
}

impl LearnerPolicy {
    pub fn new(net: Mlp, label: impl Into<String>) -> LearnerPolicy {
        LearnerPolicy { net, label: label.into() }
    }
}

impl Policy for LearnerPolicy {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn decide(&mut self, ctx: &PolicyCtx) -> Result<usize> {
        if ctx.features.len() != self.net.input_dim() {
            return Err(CoreError::InvalidData(format!(
                "policy {} expects {} features, observation has {}",
                self.label,
                self.net.input_dim(),
                ctx.features.len()
            )));
        }
        Ok(argmax(&self.net.forward(ctx.features)))
    }
}

/// Always emits the same action index (e.g. 0 = close/stay flat).
pub struct FixedActionPolicy {
    pub index: usize,
    label: String,
}

impl FixedActionPolicy {
    pub fn new(index: usize, label: impl Into<String>) -> FixedActionPolicy {
        FixedActionPolicy { index, label: label.into() }
    }
}

impl Policy for FixedActionPolicy {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn decide(&mut self, _ctx: &PolicyCtx) -> Result<usize> {
        Ok(self.index)
    }
}

/// One routing decision, recorded per step by [`RoutedPolicy`].
#[derive(Debug, Clone, PartialEq)]
pub struct RouteRecord {
    pub ts: u64,
    pub winning_dynamic: usize,
    pub winning_score: f64,
    /// `dyn_<i>` when a specialist traded, `conservative` otherwise.
    pub choice: String,
}

/// Risk-aware dispatcher: scores the recent indicator window against every
/// dynamic's regime model, then acts with the winning dynamic's specialist —
/// or with the stop-loss rule when no model is confident enough.
pub struct RoutedPolicy {
    models: Vec<RegimeModel>,
    /// One specialist value network per dynamic, same order as `models`.
    nets: Vec<Mlp>,
    cfg: RouterConfig,
    /// When false the confidence threshold is ignored and the winning
    /// specialist always trades (threshold-off ablation).
    use_tau: bool,
    /// Per-step routing decisions, oldest first.
    pub log: Vec<RouteRecord>,
    label: String,
}

impl RoutedPolicy {
    pub fn new(
        models: Vec<RegimeModel>,
        nets: Vec<Mlp>,
        cfg: RouterConfig,
        use_tau: bool,
    ) -> Result<RoutedPolicy> {
        cfg.validate()?;
        if models.is_empty() || models.len() != nets.len() {
            return Err(CoreError::InvalidConfig(
                "routed policy needs one value network per regime model".into(),
            ));
        }
        let label = if use_tau { "routed" } else { "routed_no_tau" };
        Ok(RoutedPolicy { models, nets, cfg, use_tau, log: Vec::new(), label: label.into() })
    }
}

impl Policy for RoutedPolicy {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn decide(&mut self, ctx: &PolicyCtx) -> Result<usize> {
        if ctx.t >= ctx.ds.states.len() {
            return Err(CoreError::InvalidData(
                "routed policy needs indicator states for every bar".into(),
            ));
        }
        // Indicator window ending at the decision bar, clipped to warmed-up
        // history; never shorter than one state.
        let lo = (ctx.t + 1).saturating_sub(self.cfg.window).max(ctx.ds.warmup);
        let window: Vec<Vec<f64>> =
            ctx.ds.states[lo..=ctx.t].iter().map(|s| s.indicators.clone()).collect();
        let mut decision = route(&window, &self.models, &self.cfg)?;
        if !self.use_tau {
            decision.choice = RouteChoice::Policy(decision.winning_dynamic);
        }
        let (action, choice) = match decision.choice {
            RouteChoice::Policy(d) => {
                let net = &self.nets[d];
                if ctx.features.len() != net.input_dim() {
                    return Err(CoreError::InvalidData(format!(
                        "specialist {d} expects {} features, observation has {}",
                        net.input_dim(),
                        ctx.features.len()
                    )));
                }
                (argmax(&net.forward(ctx.features)), format!("dyn_{d}"))
            }
            RouteChoice::Conservative => (
                conservative_action(ctx.account, ctx.mark, ctx.space, self.cfg.drawdown),
                "conservative".into(),
            ),
        };
        self.log.push(RouteRecord {
            ts: ctx.ts,
            winning_dynamic: decision.winning_dynamic,
            winning_score: decision.winning_score,
            choice,
        });
        Ok(action)
    }

    fn reset(&mut self) {
        self.log.clear();
    }
}

/// Margin balance and position after one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct EquityPoint {
    /// Timestamp of the bar the step advanced to.
    pub ts: u64,
    /// Margin balance after the step.
    pub v: f64,
    /// Held position after the step.
    pub position: f64,
    /// Action index the policy chose.
    pub action: usize,
    /// True when the action was coerced to hold by the affordability check.
    pub coerced: bool,
    pub fees: f64,
    pub funding: f64,
}

/// Full record of one rollout: margin-balance path, closed trades, costs.
#[derive(Debug, Clone, PartialEq)]
pub struct EquityCurve {
    /// Timestamp of the bar the rollout started on.
    pub start_ts: u64,
    /// Margin balance before the first step.
    pub initial_v: f64,
    /// Position held before the first step.
    pub initial_position: f64,
    /// Position cap of the action space, kept for turnover normalization.
    pub h_max: f64,
    pub points: Vec<EquityPoint>,
    pub trades: Vec<ClosedTrade>,
    /// True when any step forced a liquidation.
    pub liquidated: bool,
}

impl EquityCurve {
    /// Margin-balance path including the pre-step initial value.
    pub fn values(&self) -> Vec<f64> {
        std::iter::once(self.initial_v).chain(self.points.iter().map(|p| p.v)).collect()
    }

    /// Position path including the pre-step initial position.
    pub fn positions(&self) -> Vec<f64> {
        std::iter::once(self.initial_position)
            .chain(self.points.iter().map(|p| p.position))
            .collect()
    }

    pub fn final_v(&self) -> f64 {
        self.points.last().map_or(self.initial_v, |p| p.v)
    }

    /// Fractional margin-balance change over the rollout.
    pub fn total_return(&self) -> f64 {
        (self.final_v() - self.initial_v) / self.initial_v
    }

    /// Write `ts,v,position,action,fees,funding` rows; the first row is the
    /// pre-step state with an empty action column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| CoreError::InvalidData(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["ts", "v", "position", "action", "fees", "funding"]).map_err(csv_err)?;
        w.write_record([
            self.start_ts.to_string(),
            format!("{:e}", self.initial_v),
            format!("{:e}", self.initial_position),
            String::new(),
            "0".into(),
            "0".into(),
        ])
        .map_err(csv_err)?;
        for p in &self.points {
            w.write_record([
                p.ts.to_string(),
                format!("{:e}", p.v),
                format!("{:e}", p.position),
                p.action.to_string(),
                format!("{:e}", p.fees),
                format!("{:e}", p.funding),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Write routed-policy decisions as `ts,winning_dynamic,winning_score,choice`.
pub fn write_routing_csv(records: &[RouteRecord], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| CoreError::InvalidData(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["ts", "winning_dynamic", "winning_score", "choice"]).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.ts.to_string(),
            r.winning_dynamic.to_string(),
            format!("{:e}", r.winning_score),
            r.choice.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Roll `policy` through the environment from its current state until the
/// episode ends. The caller resets the environment (and optionally forces a
/// starting position) first; the curve starts from that state.
pub fn backtest(env: &mut FuturesEnv, policy: &mut dyn Policy) -> Result<EquityCurve> {
    let h_max = env.cfg().space.h_max();
    let mut obs = env.observation();
    let start_ts = obs.ts;
    let mut curve = EquityCurve {
        start_ts,
        initial_v: env.margin_balance(),
        initial_position: env.account().position,
        h_max,
        points: Vec::with_capacity(env.steps_left()),
        trades: Vec::new(),
        liquidated: false,
    };
    while !env.done() {
        let features = obs.features(h_max);
        let action = {
            let t = env.t();
            let ctx = PolicyCtx {
                features: &features,
                account: env.account(),
                mark: env.dataset().mark[t].mark,
                space: &env.cfg().space,
                ds: env.dataset(),
                t,
                ts: obs.ts,
            };
            policy.decide(&ctx)?
        };
        let step = env
            .step(action)
            .map_err(|e| e.in_stage(&format!("backtest {} at ts {}", policy.name(), obs.ts)))?;
        obs = step.observation;
        curve.points.push(EquityPoint {
            ts: obs.ts,
            v: step.info.margin_balance,
            position: env.account().position,
            action,
            coerced: step.info.coerced,
            fees: step.info.fees_paid,
            funding: step.info.funding_paid,
        });
        if let Some(trade) = step.info.closed_trade {
            curve.trades.push(trade);
        }
        curve.liquidated |= step.info.liquidated;
    }
    Ok(curve)
}

/// Result of scoring every learner on every labeled segment.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterReport {
    /// Chosen specialist learner per dynamic (ties to the lowest index).
    pub chosen: Vec<usize>,
    /// Mean greedy total return, indexed `[dynamic][learner]`.
    pub mean_returns: Vec<Vec<f64>>,
    /// Labeled segments too short to roll out, dropped from the average.
    pub skipped_segments: usize,
}

/// Pick one specialist learner per dynamic: every learner is rolled out
/// greedily on every usable segment of that dynamic, starting once from each
/// distinct position in the action grid, and the mean total return decides.
/// Segment indices are absolute dataset bar indices.
pub fn filter_ensemble(
    ens: &Ensemble,
    ds: &Dataset,
    segs: &[Segment],
    n_dynamics: usize,
    cfg: &EnvCfg,
) -> Result<FilterReport> {
    if n_dynamics == 0 {
        return Err(CoreError::InvalidConfig("need at least one dynamic".into()));
    }
    cfg.validate()?;
    let mut usable: Vec<Vec<&Segment>> = vec![Vec::new(); n_dynamics];
    let mut skipped = 0usize;
    for s in segs {
        let label = s.label.ok_or_else(|| {
            CoreError::InvalidData(format!("segment [{}, {}) is unlabeled", s.start, s.end))
        })?;
        if label >= n_dynamics {
            return Err(CoreError::InvalidData(format!(
                "segment label {label} out of range for {n_dynamics} dynamics"
            )));
        }
        if s.end > ds.len() {
            return Err(CoreError::InvalidData(format!(
                "segment [{}, {}) outside the {}-bar dataset",
                s.start,
                s.end,
                ds.len()
            )));
        }
        // The environment needs two future bars after its (warmup-clamped)
        // start to take a step.
        if s.start.max(ds.warmup) + 2 <= s.end {
            usable[label].push(s);
        } else {
            skipped += 1;
        }
    }
    for (d, group) in usable.iter().enumerate() {
        if group.is_empty() {
            return Err(CoreError::InvalidData(format!(
                "dynamic {d} has no usable segments to filter on"
            )));
        }
    }

    // Distinct starting positions of the action grid, in grid order.
    let space = &cfg.space;
    let mut pool: Vec<f64> = Vec::new();
    for i in 0..space.size() {
        let (pos, _) = space.action(i)?;
        if !pool.contains(&pos) {
            pool.push(pos);
        }
    }

    let n_learners = ens.n_learners();
    let tasks: Vec<(usize, usize)> = (0..n_dynamics)
        .flat_map(|d| (0..n_learners).map(move |i| (d, i)))
        .collect();
    let means: Vec<f64> = tasks
        .par_iter()
        .map(|&(d, i)| -> Result<f64> {
            let mut sum = 0.0;
            let mut count = 0usize;
            for seg in &usable[d] {
                for &p in &pool {
                    let mut env = FuturesEnv::new(ds, seg.start..seg.end, cfg.clone())
                        .map_err(|e| e.in_stage("filter"))?;
                    env.reset();
                    if p != 0.0 {
                        env.force_position(p);
                    }
                    let v0 = env.margin_balance();
                    let mut policy =
                        LearnerPolicy::new(ens.learner(i).online.clone(), format!("learner_{i}"));
                    let curve = backtest(&mut env, &mut policy)?;
                    sum += (curve.final_v() - v0) / v0;
                    count += 1;
                }
            }
            Ok(sum / count as f64)
        })
        .collect::<Result<_>>()?;

    let mut mean_returns = vec![vec![0.0; n_learners]; n_dynamics];
    for (&(d, i), &m) in tasks.iter().zip(means.iter()) {
        mean_returns[d][i] = m;
    }
    let chosen = mean_returns.iter().map(|row| argmax(row)).collect();
    Ok(FilterReport { chosen, mean_returns, skipped_segments: skipped })
}
