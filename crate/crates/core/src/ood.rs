//! Per-dynamic VAE density models with ECDF-normalized familiarity scores.
//!
//! One VAE is fitted to the market-state vectors of each labeled dynamic; all
//! VAEs share the same architecture and initial weights, so only the data
//! differs. After training, each state of the dynamic is scored with the
//! negated VAE loss under a fixed evaluation noise draw; the sorted list of
//! these reference scores defines a right-continuous ECDF. Scoring a new
//! state returns the fraction of reference scores at or below its negated
//! loss — near 1 means familiar, near 0 means out of distribution.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::checkpoint::{self, Tensor};
use crate::nn::{Adam, AdamCfg, LrSchedule, Vae};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OodCfg {
    /// Hidden width of both VAE halves.
    pub hidden: usize,
    /// Latent dimension; every dynamic needs at least `latent · 10` states.
    pub latent: usize,
    /// Full passes over each dynamic's states.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight initialization and training-noise seed, shared by all dynamics.
    pub seed: u64,
    /// Seed of the fixed evaluation noise used for every score.
    pub eval_seed: u64,
    /// Reparameterization draws averaged per evaluation (1 = single draw).
    pub eval_samples: usize,
}

impl Default for OodCfg {
    fn default() -> OodCfg {
        OodCfg {
            hidden: 128,
            latent: 8,
            epochs: 2000,
            batch_size: 128,
            lr: 1e-3,
            seed: 7,
            eval_seed: 7,
            eval_samples: 1,
        }
    }
}

impl OodCfg {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.latent == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::InvalidConfig(
                "vae sizes, epochs, and batch size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::InvalidConfig(format!("bad learning rate {}", self.lr)));
        }
        if self.eval_samples == 0 {
            return Err(CoreError::InvalidConfig("need at least one evaluation draw".into()));
        }
        Ok(())
    }
}

/// Fixed standard-normal draws used for every evaluation: a pure function of
/// the seed, so scoring never depends on call order.
fn eval_noise(seed: u64, latent: usize, samples: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| (0..latent).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// A fitted dynamic: its VAE, the sorted reference scores of the dynamic's
/// own states, and the evaluation-noise settings that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeModel {
    pub dynamic: usize,
    pub vae: Vae,
    /// Sorted ascending; each entry is `−loss` of one reference state.
    pub reference_scores: Vec<f64>,
    pub eval_seed: u64,
    pub eval_samples: usize,
    /// Per-epoch mean training loss (not persisted).
    pub train_loss: Vec<f64>,
}

impl RegimeModel {
    /// Negated VAE loss of `y` under the fixed evaluation noise.
    pub fn raw_score(&self, y: &[f64]) -> Result<f64> {
        let draws = eval_noise(self.eval_seed, self.vae.latent, self.eval_samples);
        let mut total = 0.0;
        for noise in &draws {
            total += self.vae.loss(y, noise)?.total;
        }
        Ok(-total / draws.len() as f64)
    }

    /// Right-continuous ECDF of the reference scores: the fraction at or
    /// below `raw`.
    pub fn ecdf(&self, raw: f64) -> f64 {
        let below = self.reference_scores.partition_point(|r| *r <= raw);
        below as f64 / self.reference_scores.len() as f64
    }

    /// Familiarity of `y` in `[0, 1]`.
    pub fn score(&self, y: &[f64]) -> Result<f64> {
        Ok(self.ecdf(self.raw_score(y)?))
    }

    /// Write `vae.ckpt` and `refs.csv` into `dir` (created if needed).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut tensors = self.vae.to_tensors();
        tensors.push(Tensor::scalar("dynamic", self.dynamic as f64));
        tensors.push(Tensor::scalar("eval_seed", self.eval_seed as f64));
        tensors.push(Tensor::scalar("eval_samples", self.eval_samples as f64));
        checkpoint::save(&dir.join("vae.ckpt"), &tensors)?;

        let refs_path = dir.join("refs.csv");
        let csv_err =
            |e: csv::Error| CoreError::InvalidData(format!("{}: {e}", refs_path.display()));
        let mut w = csv::Writer::from_path(&refs_path).map_err(csv_err)?;
        w.write_record(["score"]).map_err(csv_err)?;
        for r in &self.reference_scores {
            w.write_record([format!("{r:e}")]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`RegimeModel::save`]; the training-loss history is not
    /// persisted and comes back empty.
    pub fn load(dir: &Path) -> Result<RegimeModel> {
        let tensors = checkpoint::load(&dir.join("vae.ckpt"))?;
        let scalar = |name: &str| -> Result<f64> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| t.data[0])
                .ok_or_else(|| CoreError::Checkpoint(format!("missing '{name}' tensor")))
        };
        let vae = Vae::from_tensors(&tensors)?;
        let refs_path = dir.join("refs.csv");
        let mut r = csv::Reader::from_path(&refs_path)
            .map_err(|e| CoreError::InvalidData(format!("{}: {e}", refs_path.display())))?;
        let mut reference_scores = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let parse_err = |msg: String| CoreError::Parse {
                path: refs_path.display().to_string(),
                line: row as u64 + 2,
                msg,
            };
            let rec = rec.map_err(|e| parse_err(e.to_string()))?;
            let raw = rec.get(0).ok_or_else(|| parse_err("missing score column".into()))?;
            reference_scores
                .push(raw.parse::<f64>().map_err(|_| parse_err(format!("bad score {raw:?}")))?);
        }
        if reference_scores.is_empty() {
            return Err(CoreError::InvalidData(format!(
                "{}: no reference scores",
                refs_path.display()
            )));
        }
        if reference_scores.windows(2).any(|w| w[0] > w[1]) {
            return Err(CoreError::InvalidData(format!(
                "{}: reference scores are not sorted",
                refs_path.display()
            )));
        }
        Ok(RegimeModel {
            dynamic: scalar("dynamic")? as usize,
            vae,
            reference_scores,
            eval_seed: scalar("eval_seed")? as u64,
            eval_samples: scalar("eval_samples")? as usize,
            train_loss: Vec::new(),
        })
    }
}

/// Fit one VAE per dynamic on `states_by_dynamic[label]` and compute each
/// dynamic's reference scores on the same states. All VAEs start from the
/// same seed, so identical state sets produce identical models.
pub fn fit_vaes(states_by_dynamic: &[Vec<Vec<f64>>], cfg: &OodCfg) -> Result<Vec<RegimeModel>> {
    cfg.validate()?;
    if states_by_dynamic.is_empty() {
        return Err(CoreError::InvalidConfig("no dynamics to fit".into()));
    }
    let dim = states_by_dynamic
        .iter()
        .flatten()
        .next()
        .map(Vec::len)
        .ok_or_else(|| CoreError::InvalidData("dynamic 0 has no states".into()))?;
    if dim == 0 {
        return Err(CoreError::InvalidData("states are zero-dimensional".into()));
    }
    for (label, states) in states_by_dynamic.iter().enumerate() {
        if states.is_empty() {
            return Err(CoreError::InvalidData(format!("dynamic {label} has no states")));
        }
        if states.len() < cfg.latent * 10 {
            return Err(CoreError::InvalidData(format!(
                "dynamic {label} has {} states; need at least {} for latent dim {}",
                states.len(),
                cfg.latent * 10,
                cfg.latent
            )));
        }
        if let Some(bad) = states.iter().find(|s| s.len() != dim) {
            return Err(CoreError::InvalidData(format!(
                "dynamic {label} has a state of dimension {} (expected {dim})",
                bad.len()
            )));
        }
        if states.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidData(format!(
                "dynamic {label} contains non-finite state values"
            )));
        }
    }
    states_by_dynamic
        .par_iter()
        .enumerate()
        .map(|(label, states)| fit_one(label, states, dim, cfg))
        .collect()
}

fn fit_one(label: usize, states: &[Vec<f64>], dim: usize, cfg: &OodCfg) -> Result<RegimeModel> {
    let mut vae = Vae::new(dim, cfg.hidden, cfg.latent, cfg.seed);
    let lr = AdamCfg::with_schedule(LrSchedule::constant(cfg.lr));
    let mut enc_opt = Adam::new(vae.encoder.param_count(), lr.clone());
    let mut dec_opt = Adam::new(vae.decoder.param_count(), lr);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x0DD_0DD_0DD);
    let mut order: Vec<usize> = (0..states.len()).collect();
    let mut train_loss = Vec::with_capacity(cfg.epochs);

    for _epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut enc_grads = vae.encoder.zero_grads();
            let mut dec_grads = vae.decoder.zero_grads();
            for &idx in chunk {
                let noise: Vec<f64> =
                    (0..cfg.latent).map(|_| StandardNormal.sample(&mut rng)).collect();
                let loss = vae
                    .loss_backward(&states[idx], &noise, &mut enc_grads, &mut dec_grads)
                    .map_err(|e| e.in_stage(&format!("fit-vae dynamic {label}")))?;
                epoch_loss += loss.total;
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in &mut enc_grads {
                *g *= scale;
            }
            for g in &mut dec_grads {
                *g *= scale;
            }
            enc_opt.step(vae.encoder.params_mut(), &enc_grads)?;
            dec_opt.step(vae.decoder.params_mut(), &dec_grads)?;
        }
        train_loss.push(epoch_loss / states.len() as f64);
    }

    let draws = eval_noise(cfg.eval_seed, cfg.latent, cfg.eval_samples);
    let mut reference_scores = Vec::with_capacity(states.len());
    for y in states {
        let mut total = 0.0;
        for noise in &draws {
            total += vae.loss(y, noise)?.total;
        }
        reference_scores.push(-total / draws.len() as f64);
    }
    reference_scores.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    Ok(RegimeModel {
        dynamic: label,
        vae,
        reference_scores,
        eval_seed: cfg.eval_seed,
        eval_samples: cfg.eval_samples,
        train_loss,
    })
}

/// Fisher–Yates with the caller's RNG.
fn shuffle(order: &mut [usize], rng: &mut ChaCha20Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
}

/// Save every model under `dir/dyn_{i}/`.
pub fn save_regimes(models: &[RegimeModel], dir: &Path) -> Result<()> {
    for m in models {
        m.save(&dir.join(format!("dyn_{}", m.dynamic)))?;
    }
    Ok(())
}

/// Load `m` models from `dir/dyn_{i}/`, checking each recorded dynamic id.
pub fn load_regimes(dir: &Path, m: usize) -> Result<Vec<RegimeModel>> {
    (0..m)
        .map(|i| {
            let model = RegimeModel::load(&dir.join(format!("dyn_{i}")))?;
            if model.dynamic != i {
                return Err(CoreError::Checkpoint(format!(
                    "dyn_{i} checkpoint records dynamic {}",
                    model.dynamic
                )));
            }
            Ok(model)
        })
        .collect()
}
