//! End-to-end run orchestration.
//!
//! Stages: build the dataset (synthetic or CSV) → compute the optimal-value
//! oracle over the training range → pretrain on demonstrations → selective
//! ensemble training → segment and label the validation range → fit one
//! regime model per dynamic → filter specialists → pick router parameters →
//! backtest the routed policy and its ablations on the test range.
//!
//! Artifacts land in one output directory: `config.toml` (resolved
//! configuration), `q_star.ckpt`, `ensemble/`, `segments.csv`, `regimes/`,
//! `tune_grid.csv`, `equity_<name>.csv` per run, `routing*.csv`,
//! `summary.json`, and `timings.json`. Everything except `timings.json` is
//! byte-deterministic for a given configuration and seed.
//!
//! With `resume`, the three expensive stages (oracle, training, regime
//! models) are reloaded from their artifacts when the configuration hash and
//! artifact checksums both match; cheap stages always recompute.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backtest::{
    backtest, compute_metrics, filter_ensemble, tune_router, write_routing_csv, write_tune_csv,
    EquityCurve, LearnerPolicy, MetricsReport, Policy, RoutedPolicy,
};
use crate::config::PipelineCfg;
use crate::dp::{demo_transitions, optimal_action_value, standard_policies, OptimalQTable};
use crate::ensemble::{pretrain, train_loop, Ensemble};
use crate::env::{EnvCfg, FuturesEnv};
use crate::error::{CoreError, Result};
use crate::market_data::{
    compute_indicators, default_indicators, generate_synthetic, load_dataset, split_chrono,
    DataPaths, Dataset, MarketState, SplitRanges,
};
use crate::nn::Mlp;
use crate::ood::{fit_vaes, load_regimes, save_regimes, RegimeModel};
use crate::router::RouterConfig;
use crate::segment::{label_dynamics, segment, write_segments_csv, Segment};

// ── summary ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub bars: usize,
    pub warmup: usize,
    pub dropped: usize,
    pub indicator_dim: usize,
    pub train: (usize, usize),
    pub valid: (usize, usize),
    pub test: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    /// Bars the exact recursion covered.
    pub bars: usize,
    pub n_actions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub demo_transitions: usize,
    pub pretrain_batches: usize,
    pub pretrain_final_loss: Option<f64>,
    pub env_steps: u64,
    pub updates: u64,
    /// Batch transitions anchored per learner over all selective updates.
    pub anchor_counts: Vec<u64>,
    pub final_epoch_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub segments: usize,
    /// True when every slope tied and labeling fell back to the middle bucket.
    pub degenerate: bool,
    pub segments_per_dynamic: Vec<usize>,
    pub bars_per_dynamic: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub dynamic: usize,
    pub train_states: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub chosen: Vec<usize>,
    pub mean_returns: Vec<Vec<f64>>,
    pub skipped_segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterSummary {
    pub tuned: bool,
    pub grid_points: usize,
    pub cfg: RouterConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestSummary {
    pub name: String,
    pub metrics: MetricsReport,
}

/// Machine-readable run report, written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub data: DataSummary,
    pub oracle: Option<OracleSummary>,
    pub training: TrainSummary,
    pub segmentation: SegmentationSummary,
    pub regimes: Vec<RegimeSummary>,
    pub filter: FilterSummary,
    pub router: RouterSummary,
    pub backtests: Vec<BacktestSummary>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub summary: Summary,
    pub out_dir: PathBuf,
}

// ── resume bookkeeping ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct StateFile {
    config_hash: String,
    /// Stage name → combined checksum of its artifacts.
    stages: BTreeMap<String, String>,
}

fn fnv1a(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h ^= u64::from(b);
        *h = h.wrapping_mul(0x100_0000_01b3);
    }
}

/// Fold a file (or a directory, recursively in name order) into the hash.
fn hash_into(h: &mut u64, path: &Path) -> Result<()> {
    if fs::metadata(path)?.is_dir() {
        let mut entries: Vec<_> =
            fs::read_dir(path)?.collect::<std::io::Result<Vec<_>>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            fnv1a(h, e.file_name().to_string_lossy().as_bytes());
            hash_into(h, &e.path())?;
        }
    } else {
        fnv1a(h, &fs::read(path)?);
    }
    Ok(())
}

fn hash_paths(paths: &[PathBuf]) -> Result<String> {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for p in paths {
        fnv1a(&mut h, p.file_name().unwrap_or_default().to_string_lossy().as_bytes());
        hash_into(&mut h, p)?;
    }
    Ok(format!("{h:016x}"))
}

fn hash_str(text: &str) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    fnv1a(&mut h, text.as_bytes());
    format!("{h:016x}")
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, format!("{}\n", serde_json::to_string_pretty(value)?))?;
    Ok(())
}

/// True when the stage's recorded artifact checksum still matches the files
/// on disk.
fn stage_cached(state: &StateFile, name: &str, paths: &[PathBuf]) -> bool {
    state
        .stages
        .get(name)
        .is_some_and(|recorded| hash_paths(paths).ok().as_deref() == Some(recorded.as_str()))
}

fn record_stage(
    state: &mut StateFile,
    state_path: &Path,
    name: &str,
    paths: &[PathBuf],
) -> Result<()> {
    let h = hash_paths(paths)?;
    state.stages.insert(name.to_string(), h);
    write_json(state_path, state)
}

// ── stages ──────────────────────────────────────────────────────────────────

/// Load (or synthesize) the market data named by the configuration, split it
/// chronologically, and attach normalized indicator states.
pub fn build_dataset(cfg: &PipelineCfg) -> Result<Dataset> {
    let raw = match &cfg.data.csv_dir {
        Some(dir) => load_dataset(&DataPaths::in_dir(dir), &cfg.data.schema)?,
        None => generate_synthetic(&cfg.data.synthetic, cfg.seed)?,
    };
    let ds = split_chrono(raw, cfg.data.split)?;
    let ds = compute_indicators(ds, &default_indicators())?;
    ds.validate()?;
    if ds.states.is_empty() {
        return Err(CoreError::InvalidData("dataset has no indicator states".into()));
    }
    Ok(ds)
}

fn run_backtest_once(
    ds: &Dataset,
    range: Range<usize>,
    env_cfg: &EnvCfg,
    policy: &mut dyn Policy,
    out_dir: &Path,
    bars_per_day: usize,
) -> Result<(MetricsReport, EquityCurve)> {
    let name = policy.name();
    let mut env = FuturesEnv::new(ds, range, env_cfg.clone())?;
    env.reset();
    policy.reset();
    let curve = backtest(&mut env, policy)?;
    curve.write_csv(&out_dir.join(format!("equity_{name}.csv")))?;
    let metrics = compute_metrics(&curve, bars_per_day)?;
    Ok((metrics, curve))
}

/// Stage names in execution order; `run_pipeline_until` accepts any of them.
pub const STAGES: [&str; 9] = [
    "data",
    "oracle",
    "train",
    "segmentation",
    "regime-models",
    "filter",
    "tune-router",
    "backtest",
    "report",
];

/// Run every stage, writing artifacts into `out_dir`. With `resume`, cached
/// oracle/training/regime artifacts are reloaded when their checksums match
/// the recorded state for this exact configuration.
pub fn run_pipeline(cfg_in: &PipelineCfg, out_dir: &Path, resume: bool) -> Result<PipelineOutcome> {
    run_pipeline_until(cfg_in, out_dir, resume, None)?.ok_or_else(|| {
        CoreError::InvalidConfig("full pipeline run ended without a summary".into())
    })
}

/// When a timed stage finishes and matches the requested cutoff, persist the
/// timings collected so far and signal the caller to stop.
fn stop_here(
    until: Option<&str>,
    name: &str,
    out_dir: &Path,
    timings: &[(String, f64)],
) -> Result<bool> {
    if until == Some(name) {
        write_json(&out_dir.join("timings.json"), &timings)?;
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Like [`run_pipeline`], but stop once the named stage has completed, leaving
/// its artifacts (and `timings.json`) behind. `None` — or `"report"` — runs
/// everything and yields the summary; earlier cutoffs yield `Ok(None)`.
pub fn run_pipeline_until(
    cfg_in: &PipelineCfg,
    out_dir: &Path,
    resume: bool,
    until: Option<&str>,
) -> Result<Option<PipelineOutcome>> {
    if let Some(name) = until {
        if !STAGES.contains(&name) {
            return Err(CoreError::InvalidConfig(format!(
                "unknown pipeline stage '{name}' (expected one of {})",
                STAGES.join(", ")
            )));
        }
    }
    cfg_in.validate()?;
    let mut cfg = cfg_in.clone();
    // The master seed drives every stage's RNG stream.
    cfg.ensemble.seed = cfg.seed ^ 0xE25E_B1E5;
    cfg.ood.seed = cfg.seed ^ 0x0DD5_EED0;
    cfg.ood.eval_seed = cfg.seed ^ 0x0DDE_7A10;

    fs::create_dir_all(out_dir)?;
    cfg.save_toml(&out_dir.join("config.toml"))?;
    let cfg_text = fs::read_to_string(out_dir.join("config.toml"))?;
    let cfg_hash = hash_str(&cfg_text);

    let state_path = out_dir.join("pipeline_state.json");
    let mut state = StateFile { config_hash: cfg_hash.clone(), stages: BTreeMap::new() };
    if resume && state_path.exists() {
        let old: StateFile = read_json(&state_path)?;
        if old.config_hash == cfg_hash {
            state = old;
        }
    }
    let mut timings: Vec<(String, f64)> = Vec::new();

    // ── data ────────────────────────────────────────────────────────────────
    let t = Instant::now();
    let ds = build_dataset(&cfg).map_err(|e| e.in_stage("data"))?;
    let splits: SplitRanges =
        ds.splits.clone().expect("split_chrono always records split ranges");
    let indicator_dim = ds.states[0].indicators.len();
    let feature_dim = MarketState::feature_dim(indicator_dim);
    let data_summary = DataSummary {
        bars: ds.len(),
        warmup: ds.warmup,
        dropped: ds.dropped,
        indicator_dim,
        train: (splits.train.start, splits.train.end),
        valid: (splits.valid.start, splits.valid.end),
        test: (splits.test.start, splits.test.end),
    };
    timings.push(("data".into(), t.elapsed().as_secs_f64()));
    if stop_here(until, "data", out_dir, &timings)? {
        return Ok(None);
    }

    // Environment episodes never start before the indicator warmup.
    let train_start = splits.train.start.max(ds.warmup);
    let train_end = splits.train.end.min(train_start + cfg.dp.max_bars);
    let train_range = train_start..train_end;
    if train_start + 2 > train_range.end {
        return Err(CoreError::InvalidConfig(
            "training range is too short after warmup".into(),
        ));
    }

    // ── oracle ──────────────────────────────────────────────────────────────
    let t = Instant::now();
    let q_path = out_dir.join("q_star.ckpt");
    let oracle_frag = out_dir.join("oracle_summary.json");
    let train_paths = [out_dir.join("ensemble"), out_dir.join("train_summary.json")];
    let need_train = !stage_cached(&state, "train", &train_paths);
    let oracle_paths = [q_path.clone(), oracle_frag.clone()];
    let mut table: Option<OptimalQTable> = None;
    let oracle_summary: Option<OracleSummary> = if cfg.dp.enabled {
        if stage_cached(&state, "oracle", &oracle_paths) {
            if need_train {
                table = Some(OptimalQTable::load(&q_path).map_err(|e| e.in_stage("oracle"))?);
            }
            Some(read_json(&oracle_frag).map_err(|e| e.in_stage("oracle"))?)
        } else {
            let q = optimal_action_value(
                &ds,
                train_range.clone(),
                &cfg.env.space,
                cfg.dp.penalty,
                cfg.dp.capital,
                &cfg.env,
            )
            .map_err(|e| e.in_stage("oracle"))?;
            q.save(&q_path).map_err(|e| e.in_stage("oracle"))?;
            let summary =
                OracleSummary { bars: train_range.end - train_range.start, n_actions: q.n_actions() };
            write_json(&oracle_frag, &summary)?;
            record_stage(&mut state, &state_path, "oracle", &oracle_paths)?;
            table = Some(q);
            Some(summary)
        }
    } else {
        None
    };
    timings.push(("oracle".into(), t.elapsed().as_secs_f64()));
    if stop_here(until, "oracle", out_dir, &timings)? {
        return Ok(None);
    }

    // ── pretraining and selective training ──────────────────────────────────
    let t = Instant::now();
    let ens_dir = out_dir.join("ensemble");
    let train_frag = out_dir.join("train_summary.json");
    let (ens, train_summary): (Ensemble, TrainSummary) = if !need_train {
        (
            Ensemble::load_dir(&ens_dir).map_err(|e| e.in_stage("train"))?,
            read_json(&train_frag).map_err(|e| e.in_stage("train"))?,
        )
    } else {
        let mut ens = Ensemble::new(feature_dim, cfg.env.space.size(), cfg.ensemble.clone())
            .map_err(|e| e.in_stage("train"))?;
        let mut env = FuturesEnv::new(&ds, train_range.clone(), cfg.env.clone())
            .map_err(|e| e.in_stage("train"))?;
        let (n_demos, pretrain_losses) = match &table {
            Some(q) => {
                let demos = demo_transitions(q, &mut env, &standard_policies())
                    .map_err(|e| e.in_stage("pretrain"))?;
                let losses = pretrain(&mut ens, &demos, &cfg.ensemble.alpha.clone())
                    .map_err(|e| e.in_stage("pretrain"))?;
                (demos.len(), losses)
            }
            None => (0, Vec::new()),
        };
        let report = train_loop(&mut env, &mut ens, table.as_ref(), &cfg.train)?;
        ens.save_dir(&ens_dir).map_err(|e| e.in_stage("train"))?;
        let summary = TrainSummary {
            demo_transitions: n_demos,
            pretrain_batches: pretrain_losses.len(),
            pretrain_final_loss: pretrain_losses.last().copied(),
            env_steps: report.env_steps,
            updates: report.updates,
            anchor_counts: report.anchor_counts,
            final_epoch_loss: report.epoch_mean_loss.last().copied(),
        };
        write_json(&train_frag, &summary)?;
        record_stage(&mut state, &state_path, "train", &train_paths)?;
        (ens, summary)
    };
    timings.push(("train".into(), t.elapsed().as_secs_f64()));
    if stop_here(until, "train", out_dir, &timings)? {
        return Ok(None);
    }

    // ── segmentation of the validation range ────────────────────────────────
    let t = Instant::now();
    let valid_range = splits.valid.start.max(ds.warmup)..splits.valid.end;
    let prices: Vec<f64> = ds.mark[valid_range.clone()].iter().map(|m| m.mark).collect();
    let (segs, seg_summary) = (|| -> Result<(Vec<Segment>, SegmentationSummary)> {
        let mut segs = segment(&prices, &cfg.segment)?;
        let outcome = label_dynamics(&mut segs, cfg.n_dynamics)?;
        for s in &mut segs {
            s.start += valid_range.start;
            s.end += valid_range.start;
        }
        let ts: Vec<u64> = ds.timestamps().collect();
        write_segments_csv(&out_dir.join("segments.csv"), &segs, &ts)?;
        let mut per_dyn = vec![0usize; cfg.n_dynamics];
        let mut bars = vec![0usize; cfg.n_dynamics];
        for s in &segs {
            let d = s.label.expect("label_dynamics labels every segment");
            per_dyn[d] += 1;
            bars[d] += s.len();
        }
        let summary = SegmentationSummary {
            segments: segs.len(),
            degenerate: outcome.degenerate,
            segments_per_dynamic: per_dyn,
            bars_per_dynamic: bars,
        };
        Ok((segs, summary))
    })()
    .map_err(|e| e.in_stage("segmentation"))?;
    timings.push(("segmentation".into(), t.elapsed().as_secs_f64()));
    if stop_here(until, "segmentation", out_dir, &timings)? {
        return Ok(None);
    }

    // ── regime models ───────────────────────────────────────────────────────
    let t = Instant::now();
    let regimes_dir = out_dir.join("regimes");
    let ood_frag = out_dir.join("ood_summary.json");
    let regime_paths = [regimes_dir.clone(), ood_frag.clone()];
    let (models, regime_summary): (Vec<RegimeModel>, Vec<RegimeSummary>) =
        if stage_cached(&state, "regimes", &regime_paths) {
            (
                load_regimes(&regimes_dir, cfg.n_dynamics)
                    .map_err(|e| e.in_stage("regime-models"))?,
                read_json(&ood_frag).map_err(|e| e.in_stage("regime-models"))?,
            )
        } else {
            let mut by_dynamic: Vec<Vec<Vec<f64>>> = vec![Vec::new(); cfg.n_dynamics];
            for s in &segs {
                let d = s.label.expect("labeled above");
                for t_bar in s.start..s.end {
                    by_dynamic[d].push(ds.states[t_bar].indicators.clone());
                }
            }
            let models =
                fit_vaes(&by_dynamic, &cfg.ood).map_err(|e| e.in_stage("regime-models"))?;
            save_regimes(&models, &regimes_dir).map_err(|e| e.in_stage("regime-models"))?;
            let summary: Vec<RegimeSummary> = models
                .iter()
                .map(|m| RegimeSummary {
                    dynamic: m.dynamic,
                    train_states: by_dynamic[m.dynamic].len(),
                    final_loss: m.train_loss.last().copied().unwrap_or(f64::NAN),
                })
                .collect();
            write_json(&ood_frag, &summary)?;
            record_stage(&mut state, &state_path, "regimes", &regime_paths)?;
            (models, summary)
        };
    timings.push(("regime-models".into(), t.elapsed().as_secs_f64()));
    if stop_here(until, "regime-models", out_dir, &timings)? {
        return Ok(None);
    }

    // ── specialist filtering ────────────────────────────────────────────────
    let t = Instant::now();
    let filter_report = filter_ensemble(&ens, &ds, &segs, cfg.n_dynamics, &cfg.env)
        .map_err(|e| e.in_stage("filter"))?;
    let nets: Vec<Mlp> = filter_report
        .chosen
        .iter()
        .map(|&i| ens.learner(i).online.clone())
        .collect();
    let filter_summary = FilterSummary {
        chosen: filter_report.chosen.clone(),
        mean_returns: filter_report.mean_returns.clone(),
        skipped_segments: filter_report.skipped_segments,
    };
    timings.push(("filter".into(), t.elapsed().as_secs_f64()));
    if stop_here(until, "filter", out_dir, &timings)? {
        return Ok(None);
    }

    // ── router parameters ───────────────────────────────────────────────────
    let t = Instant::now();
    let router_summary = if cfg.routing.tune {
        let outcome = tune_router(
            &models,
            &nets,
            &ds,
            valid_range.clone(),
            &cfg.env,
            &cfg.routing.grid,
            cfg.bars_per_day,
        )
        .map_err(|e| e.in_stage("tune-router"))?;
        write_tune_csv(&outcome, &out_dir.join("tune_grid.csv"))
            .map_err(|e| e.in_stage("tune-router"))?;
        RouterSummary { tuned: true, grid_points: outcome.grid.len(), cfg: outcome.best }
    } else {
        RouterSummary { tuned: false, grid_points: 0, cfg: cfg.routing.fixed }
    };
    let router_cfg = router_summary.cfg;
    timings.push(("tune-router".into(), t.elapsed().as_secs_f64()));
    if stop_here(until, "tune-router", out_dir, &timings)? {
        return Ok(None);
    }

    // ── test-range backtests ────────────────────────────────────────────────
    let t = Instant::now();
    let test_range = splits.test.start.max(ds.warmup)..splits.test.end;
    let mut backtests: Vec<BacktestSummary> = Vec::new();

    let mut routed = RoutedPolicy::new(models.clone(), nets.clone(), router_cfg, true)
        .map_err(|e| e.in_stage("backtest"))?;
    let (metrics, _) = run_backtest_once(
        &ds,
        test_range.clone(),
        &cfg.env,
        &mut routed,
        out_dir,
        cfg.bars_per_day,
    )
    .map_err(|e| e.in_stage("backtest"))?;
    write_routing_csv(&routed.log, &out_dir.join("routing.csv"))
        .map_err(|e| e.in_stage("backtest"))?;
    backtests.push(BacktestSummary { name: routed.name(), metrics });

    if cfg.ablations {
        let mut no_tau = RoutedPolicy::new(models.clone(), nets.clone(), router_cfg, false)
            .map_err(|e| e.in_stage("backtest"))?;
        let (metrics, _) = run_backtest_once(
            &ds,
            test_range.clone(),
            &cfg.env,
            &mut no_tau,
            out_dir,
            cfg.bars_per_day,
        )
        .map_err(|e| e.in_stage("backtest"))?;
        write_routing_csv(&no_tau.log, &out_dir.join("routing_no_tau.csv"))
            .map_err(|e| e.in_stage("backtest"))?;
        backtests.push(BacktestSummary { name: no_tau.name(), metrics });

        // Router-off: always the specialist of the dynamic that covered the
        // most validation bars (ties to the lowest dynamic id).
        let mut majority = 0usize;
        for (d, &bars) in seg_summary.bars_per_dynamic.iter().enumerate() {
            if bars > seg_summary.bars_per_dynamic[majority] {
                majority = d;
            }
        }
        let mut off = LearnerPolicy::new(
            ens.learner(filter_report.chosen[majority]).online.clone(),
            "router_off",
        );
        let (metrics, _) = run_backtest_once(
            &ds,
            test_range.clone(),
            &cfg.env,
            &mut off,
            out_dir,
            cfg.bars_per_day,
        )
        .map_err(|e| e.in_stage("backtest"))?;
        backtests.push(BacktestSummary { name: off.name(), metrics });

        for i in 0..ens.n_learners() {
            let mut single =
                LearnerPolicy::new(ens.learner(i).online.clone(), format!("learner_{i}"));
            let (metrics, _) = run_backtest_once(
                &ds,
                test_range.clone(),
                &cfg.env,
                &mut single,
                out_dir,
                cfg.bars_per_day,
            )
            .map_err(|e| e.in_stage("backtest"))?;
            backtests.push(BacktestSummary { name: single.name(), metrics });
        }
    }
    timings.push(("backtest".into(), t.elapsed().as_secs_f64()));
    if stop_here(until, "backtest", out_dir, &timings)? {
        return Ok(None);
    }

    // ── report ──────────────────────────────────────────────────────────────
    let summary = Summary {
        seed: cfg.seed,
        data: data_summary,
        oracle: oracle_summary,
        training: train_summary,
        segmentation: seg_summary,
        regimes: regime_summary,
        filter: filter_summary,
        router: router_summary,
        backtests,
    };
    write_json(&out_dir.join("summary.json"), &summary).map_err(|e| e.in_stage("report"))?;
    write_json(&out_dir.join("timings.json"), &timings).map_err(|e| e.in_stage("report"))?;
    Ok(Some(PipelineOutcome { summary, out_dir: out_dir.to_path_buf() }))
}
