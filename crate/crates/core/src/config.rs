//! Aggregate run configuration: one TOML document covering every pipeline
//! stage, with defaults sized for the full experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backtest::TuneGrid;
use crate::ensemble::{EnsembleCfg, TrainCfg};
use crate::env::EnvCfg;
use crate::error::{CoreError, Result};
use crate::market_data::{LoadSchema, SyntheticCfg};
use crate::ood::OodCfg;
use crate::router::RouterConfig;
use crate::segment::SegmentCfg;

/// Where market data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataCfg {
    /// Directory of `lob.csv`, `trades.csv`, `mark.csv`; when unset a
    /// synthetic market is generated instead.
    pub csv_dir: Option<PathBuf>,
    pub schema: LoadSchema,
    pub synthetic: SyntheticCfg,
    /// Chronological train/valid/test fractions; must sum to 1.
    pub split: (f64, f64, f64),
}

impl Default for DataCfg {
    fn default() -> DataCfg {
        DataCfg {
            csv_dir: None,
            schema: LoadSchema::default(),
            synthetic: SyntheticCfg::default(),
            split: (0.7, 0.1, 0.2),
        }
    }
}

/// Optimal-value oracle settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpCfg {
    /// Skip the oracle (and demonstration pretraining) entirely.
    pub enabled: bool,
    /// Penalty subtracted from masked cells.
    pub penalty: f64,
    /// Simulated-balance floor at or below which a cell is masked.
    pub capital: f64,
    /// Cap on the training bars the exact recursion runs over (the table is
    /// cubic in positions and linear in bars).
    pub max_bars: usize,
}

impl Default for DpCfg {
    fn default() -> DpCfg {
        DpCfg { enabled: true, penalty: 1e9, capital: 0.0, max_bars: 20_000 }
    }
}

/// Routing settings: either tune on the validation range or use `fixed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingCfg {
    pub tune: bool,
    pub grid: TuneGrid,
    pub fixed: RouterConfig,
}

impl Default for RoutingCfg {
    fn default() -> RoutingCfg {
        RoutingCfg { tune: true, grid: TuneGrid::default(), fixed: RouterConfig::default() }
    }
}

/// Full pipeline configuration. Every block has defaults, so a TOML file only
/// needs the fields it overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineCfg {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    /// Number of labeled market dynamics.
    pub n_dynamics: usize,
    /// Bars per calendar day, for daily return sampling (5-minute default).
    pub bars_per_day: usize,
    /// Also backtest every individual specialist and the routing ablations.
    pub ablations: bool,
    pub data: DataCfg,
    pub env: EnvCfg,
    pub dp: DpCfg,
    pub ensemble: EnsembleCfg,
    pub train: TrainCfg,
    pub segment: SegmentCfg,
    pub ood: OodCfg,
    pub routing: RoutingCfg,
}

impl Default for PipelineCfg {
    fn default() -> PipelineCfg {
        PipelineCfg {
            seed: 7,
            n_dynamics: 5,
            bars_per_day: 288,
            ablations: true,
            data: DataCfg::default(),
            env: EnvCfg::default(),
            dp: DpCfg::default(),
            ensemble: EnsembleCfg::default(),
            train: TrainCfg::default(),
            segment: SegmentCfg::default(),
            ood: OodCfg::default(),
            routing: RoutingCfg::default(),
        }
    }
}

impl PipelineCfg {
    pub fn load_toml(path: &Path) -> Result<PipelineCfg> {
        let text = fs::read_to_string(path)
            .map_err(|e| CoreError::InvalidData(format!("{}: {e}", path.display())))?;
        let cfg: PipelineCfg = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save_toml(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CoreError::InvalidConfig(format!("config not serializable: {e}")))?;
        fs::write(path, text)
            .map_err(|e| CoreError::InvalidData(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_dynamics == 0 {
            return Err(CoreError::InvalidConfig("need at least one dynamic".into()));
        }
        if self.bars_per_day == 0 {
            return Err(CoreError::InvalidConfig("bars_per_day must be positive".into()));
        }
        if self.dp.enabled && self.dp.max_bars < 2 {
            return Err(CoreError::InvalidConfig(
                "the value oracle needs at least two bars".into(),
            ));
        }
        self.env.validate()?;
        self.ensemble.validate()?;
        self.segment.validate()?;
        self.ood.validate()?;
        self.routing.fixed.validate()?;
        if self.routing.tune {
            self.routing.grid.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip_through_toml() {
        let cfg = PipelineCfg::default();
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        cfg.save_toml(&path).unwrap();
        let back = PipelineCfg::load_toml(&path).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_overrides_only_named_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "seed = 99\nn_dynamics = 3\n[ensemble]\nn_learners = 5\n[routing]\ntune = false\n",
        )
        .unwrap();
        let cfg = PipelineCfg::load_toml(&path).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.n_dynamics, 3);
        assert_eq!(cfg.ensemble.n_learners, 5);
        assert!(!cfg.routing.tune);
        // Untouched blocks keep their defaults.
        assert_eq!(cfg.bars_per_day, 288);
        assert_eq!(cfg.env, EnvCfg::default());
    }

    #[test]
    fn invalid_fields_are_rejected_with_context() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "n_dynamics = 0\n").unwrap();
        assert!(PipelineCfg::load_toml(&path).is_err());
        fs::write(&path, "[routing.fixed]\ngamma = 1.5\n").unwrap();
        let err = PipelineCfg::load_toml(&path).unwrap_err();
        assert!(err.to_string().contains("(0, 1)"), "{err}");
        fs::write(&path, "this is not toml [").unwrap();
        assert!(PipelineCfg::load_toml(&path).is_err());
    }

    #[test]
    fn missing_file_reports_the_path() {
        let err = PipelineCfg::load_toml(Path::new("/nonexistent/cfg.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cfg.toml"), "{err}");
    }
}
