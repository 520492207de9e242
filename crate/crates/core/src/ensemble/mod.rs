//! Ensemble of Q-learners trained with TD-error-matrix selective updates.
//!
//! Each learner is an identical MLP head over the market-state features with
//! its own target network and optimizer. Training proceeds in two phases:
//! an equal pretrain on demonstration transitions (Huber TD plus a
//! KL supervisor toward the optimal-value row), then selective updates where
//! a per-transition weight matrix concentrates gradient on the learner with
//! the most accurate estimate and its index neighbors.

mod replay;
mod tabular;
mod train;

pub use replay::ReplayBuffer;
pub use tabular::{
    ring_mdp, tabular_selective_qlearning, value_iteration, TabularCfg, TabularMdp, TabularReport,
};
pub use train::{train_loop, TrainCfg, TrainReport};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{Transition, TransitionSet};
use crate::error::{CoreError, Result};
use crate::nn::checkpoint::{self, Tensor};
use crate::nn::{
    huber, huber_grad, kl_divergence, kl_grad_logits, softmax, Adam, AdamCfg, LrSchedule, Mlp,
};

/// Huber transition width used for all TD errors.
const HUBER_DELTA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleCfg {
    pub n_learners: usize,
    /// Neighbor window half-width `m` for selective updates.
    pub neighbor_size: usize,
    pub hidden_layers: Vec<usize>,
    /// Discount factor for TD targets.
    pub gamma: f64,
    /// Soft target-update rate applied after every optimizer step.
    pub tau: f64,
    pub lr: LrSchedule,
    /// Supervisor coefficient schedule, indexed by update count.
    pub alpha: LrSchedule,
    /// Exploration schedule, indexed by environment steps.
    pub epsilon: LrSchedule,
    pub kl_temperature: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub pretrain_epochs: usize,
    pub seed: u64,
}

impl Default for EnsembleCfg {
    fn default() -> EnsembleCfg {
        EnsembleCfg {
            n_learners: 7,
            neighbor_size: 1,
            hidden_layers: vec![128],
            gamma: 0.99,
            tau: 0.005,
            lr: LrSchedule { start: 5e-3, end: 1e-4, decay_steps: 20_000 },
            alpha: LrSchedule { start: 256.0, end: 0.0, decay_steps: 500_000 },
            epsilon: LrSchedule { start: 1.0, end: 0.1, decay_steps: 100_000 },
            kl_temperature: 1.0,
            batch_size: 512,
            buffer_capacity: 1_000_000,
            pretrain_epochs: 2,
            seed: 7,
        }
    }
}

impl EnsembleCfg {
    pub fn validate(&self) -> Result<()> {
        if self.n_learners == 0 {
            return Err(CoreError::InvalidConfig("ensemble needs at least one learner".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(CoreError::InvalidConfig("gamma must be in (0, 1]".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(CoreError::InvalidConfig("tau must be in (0, 1]".into()));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(CoreError::InvalidConfig("batch size and buffer capacity must be positive".into()));
        }
        if self.kl_temperature <= 0.0 {
            return Err(CoreError::InvalidConfig("kl_temperature must be positive".into()));
        }
        Ok(())
    }
}

/// One Q-learner: online and target networks plus optimizer state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub index: usize,
    pub online: Mlp,
    pub target: Mlp,
    opt: Adam,
}

/// The ensemble itself. `alpha_step` counts optimizer updates (drives the
/// supervisor schedule); `env_steps` counts collected transitions (drives
/// exploration).
#[derive(Debug, Clone)]
pub struct Ensemble {
    cfg: EnsembleCfg,
    learners: Vec<Learner>,
    in_dim: usize,
    n_actions: usize,
    pub alpha_step: u64,
    pub env_steps: u64,
}

impl Ensemble {
    pub fn new(in_dim: usize, n_actions: usize, cfg: EnsembleCfg) -> Result<Ensemble> {
        cfg.validate()?;
        if in_dim == 0 || n_actions == 0 {
            return Err(CoreError::InvalidConfig("in_dim and n_actions must be positive".into()));
        }
        let mut sizes = vec![in_dim];
        sizes.extend_from_slice(&cfg.hidden_layers);
        sizes.push(n_actions);
        let learners = (0..cfg.n_learners)
            .map(|i| {
                let online = Mlp::new(&sizes, cfg.seed.wrapping_add(i as u64));
                let target = online.clone();
                let opt = Adam::new(online.param_count(), AdamCfg::with_schedule(cfg.lr));
                Learner { index: i, online, target, opt }
            })
            .collect();
        Ok(Ensemble { cfg, learners, in_dim, n_actions, alpha_step: 0, env_steps: 0 })
    }

    pub fn cfg(&self) -> &EnsembleCfg {
        &self.cfg
    }

    pub fn n_learners(&self) -> usize {
        self.learners.len()
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn learners(&self) -> &[Learner] {
        &self.learners
    }

    pub fn learner(&self, i: usize) -> &Learner {
        &self.learners[i]
    }

    pub fn learner_mut(&mut self, i: usize) -> &mut Learner {
        &mut self.learners[i]
    }

    /// Online Q row of learner `i`.
    pub fn q_values(&self, i: usize, state: &[f64]) -> Vec<f64> {
        self.learners[i].online.forward(state)
    }

    /// Greedy action of learner `i` (ties break toward the lowest index).
    pub fn greedy_action(&self, i: usize, state: &[f64]) -> usize {
        argmax(&self.q_values(i, state))
    }

    pub fn current_alpha(&self) -> f64 {
        self.cfg.alpha.at(self.alpha_step)
    }

    pub fn current_epsilon(&self) -> f64 {
        self.cfg.epsilon.at(self.env_steps)
    }

    /// TD target per learner `j` using `j`'s target network; terminal
    /// transitions drop the bootstrap term.
    fn td_targets(&self, tr: &Transition) -> Vec<f64> {
        self.learners
            .iter()
            .map(|l| {
                if tr.done {
                    tr.reward
                } else {
                    let next = l.target.forward(&tr.next_state);
                    tr.reward + self.cfg.gamma * next.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .collect()
    }

    fn soft_update_targets(&mut self) {
        let tau = self.cfg.tau;
        for l in &mut self.learners {
            l.target.soft_update_from(&l.online, tau);
        }
    }

    /// Deep copy of all trainable state, for rollback on training faults.
    pub fn snapshot(&self) -> Ensemble {
        self.clone()
    }

    // ── checkpointing ───────────────────────────────────────────────────────

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        for l in &self.learners {
            let d = dir.join(format!("learner_{}", l.index));
            let mut tensors = l.online.to_tensors("");
            let (m, v, t) = l.opt.state();
            tensors.push(Tensor::vector("adam_m", m));
            tensors.push(Tensor::vector("adam_v", v));
            tensors.push(Tensor::scalar("adam_t", t as f64));
            checkpoint::save(&d.join("online.ckpt"), &tensors)?;
            checkpoint::save(&d.join("target.ckpt"), &l.target.to_tensors(""))?;
        }
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            cfg: self.cfg.clone(),
            in_dim: self.in_dim,
            n_actions: self.n_actions,
            alpha_step: self.alpha_step,
            env_steps: self.env_steps,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Ensemble> {
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut learners = Vec::with_capacity(manifest.cfg.n_learners);
        for i in 0..manifest.cfg.n_learners {
            let d = dir.join(format!("learner_{i}"));
            let online_tensors = checkpoint::load(&d.join("online.ckpt"))?;
            let online = Mlp::from_tensors(&online_tensors, "")?;
            let target = Mlp::from_tensors(&checkpoint::load(&d.join("target.ckpt"))?, "")?;
            let find = |name: &str| {
                online_tensors
                    .iter()
                    .find(|t| t.name == name)
                    .ok_or_else(|| CoreError::Checkpoint(format!("missing tensor {name}")))
            };
            let opt = Adam::restore(
                AdamCfg::with_schedule(manifest.cfg.lr),
                find("adam_m")?.data.clone(),
                find("adam_v")?.data.clone(),
                find("adam_t")?.data[0] as u64,
            );
            learners.push(Learner { index: i, online, target, opt });
        }
        Ok(Ensemble {
            cfg: manifest.cfg,
            learners,
            in_dim: manifest.in_dim,
            n_actions: manifest.n_actions,
            alpha_step: manifest.alpha_step,
            env_steps: manifest.env_steps,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    cfg: EnsembleCfg,
    in_dim: usize,
    n_actions: usize,
    alpha_step: u64,
    env_steps: u64,
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ─────────────────────────────────────────────────────────────────────────────
// ETD and weight matrices
// ─────────────────────────────────────────────────────────────────────────────

/// Cross-learner Huber TD errors for one transition:
/// `L[i][j] = ℋ(r + γ·max_a' Q(s'; target_j) − Q(s, a; online_i))`.
#[derive(Debug, Clone, PartialEq)]
pub struct EtdMatrix {
    n: usize,
    l: Vec<f64>,
}

impl EtdMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.l[i * self.n + j]
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> EtdMatrix {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "matrix must be square");
        EtdMatrix { n, l: rows.iter().flatten().copied().collect() }
    }
}

pub fn etd_matrix(ens: &Ensemble, tr: &Transition) -> EtdMatrix {
    let n = ens.n_learners();
    let targets = ens.td_targets(tr);
    let preds: Vec<f64> =
        (0..n).map(|i| ens.learners[i].online.forward(&tr.state)[tr.action]).collect();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            l[i * n + j] = huber(targets[j] - preds[i], HUBER_DELTA);
        }
    }
    EtdMatrix { n, l }
}

/// Per-transition learner weights: the learner with the smallest own TD error
/// anchors a clipped index window `[i_min, i_max]`; diagonal weights decay
/// linearly from the anchor, off-diagonal entries decay with index distance.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    w: Vec<f64>,
    pub i_star: usize,
    pub i_min: usize,
    pub i_max: usize,
    pub m: usize,
}

impl WeightMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }
}

pub fn weight_matrix(l: &EtdMatrix, m: usize) -> WeightMatrix {
    let n = l.n();
    let mut i_star = 0;
    for i in 1..n {
        if l.get(i, i) < l.get(i_star, i_star) {
            i_star = i;
        }
    }
    let i_min = i_star.saturating_sub(m);
    let i_max = (i_star + m).min(n - 1);
    let mut w = vec![0.0; n * n];
    if i_max == i_min {
        // Window of width zero: the anchor takes everything.
        w[i_star * n + i_star] = 1.0;
        return WeightMatrix { n, w, i_star, i_min, i_max, m };
    }
    let span = (i_max - i_min) as f64;
    for i in i_min..=i_max {
        w[i * n + i] = 1.0 - (i as f64 - i_star as f64).abs() / span;
    }
    for i in i_min..=i_max {
        for j in i_min..=i_max {
            if i != j {
                let wii = w[i * n + i];
                let wjj = w[j * n + j];
                w[i * n + j] = wii.min(wjj) * (1.0 - (i as f64 - j as f64).abs() / span);
            }
        }
    }
    WeightMatrix { n, w, i_star, i_min, i_max, m }
}

// ─────────────────────────────────────────────────────────────────────────────
// Updates
// ─────────────────────────────────────────────────────────────────────────────

/// What one selective update did to the ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveOutcome {
    /// Batch-mean loss (weighted Huber terms plus gated KL terms).
    pub loss: f64,
    /// How many of the batch's transitions each learner anchored.
    pub anchor_counts: Vec<u64>,
    /// Which learners received an optimizer step.
    pub touched: Vec<bool>,
}

/// One selective update on a batch: per transition, the TD-error matrix picks
/// the anchor learner, the weight matrix distributes the cross-learner Huber
/// terms, and the diagonal weights gate the KL supervisor (scaled by `alpha`)
/// on transitions that carry an optimal-value row. Learners whose weights are
/// zero on the whole batch are left completely untouched (no optimizer step).
pub fn selective_update(
    ens: &mut Ensemble,
    batch: &[Transition],
    m: usize,
    alpha: f64,
) -> Result<SelectiveOutcome> {
    if batch.is_empty() {
        return Err(CoreError::InvalidConfig("selective update on an empty batch".into()));
    }
    let n = ens.n_learners();
    let n_actions = ens.n_actions;
    let temp = ens.cfg.kl_temperature;
    let mut grads: Vec<Vec<f64>> = ens.learners.iter().map(|l| l.online.zero_grads()).collect();
    let mut touched = vec![false; n];
    let mut anchor_counts = vec![0u64; n];
    let mut loss = 0.0;

    for tr in batch {
        let targets = ens.td_targets(tr);
        let fwds: Vec<_> =
            ens.learners.iter().map(|l| l.online.forward_cached(&tr.state)).collect();
        let preds: Vec<f64> = fwds.iter().map(|f| f.output()[tr.action]).collect();
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                l[i * n + j] = huber(targets[j] - preds[i], HUBER_DELTA);
            }
        }
        let w = weight_matrix(&EtdMatrix { n, l: l.clone() }, m);
        anchor_counts[w.i_star] += 1;

        for i in 0..n {
            let mut d_out = vec![0.0; n_actions];
            let mut any = false;
            for j in 0..n {
                let wij = w.get(i, j);
                if wij != 0.0 {
                    loss += wij * l[i * n + j];
                    d_out[tr.action] += wij * huber_grad(preds[i] - targets[j], HUBER_DELTA);
                    any = true;
                }
            }
            if alpha != 0.0 && w.get(i, i) != 0.0 {
                if let Some(q_row) = &tr.q_star_row {
                    let coeff = alpha * w.get(i, i);
                    let logits = fwds[i].output();
                    let q = softmax(q_row, temp);
                    let p = softmax(logits, temp);
                    loss += coeff * kl_divergence(&p, &q);
                    for (d, g) in d_out.iter_mut().zip(kl_grad_logits(logits, &q, temp)) {
                        *d += coeff * g;
                    }
                    any = true;
                }
            }
            if any {
                ens.learners[i].online.backward(&fwds[i], &d_out, &mut grads[i]);
                touched[i] = true;
            }
        }
    }

    let scale = 1.0 / batch.len() as f64;
    loss *= scale;
    if !loss.is_finite() {
        return Err(CoreError::NonFinite(format!("selective-update loss is {loss}")));
    }
    for i in 0..n {
        if touched[i] {
            for g in &mut grads[i] {
                *g *= scale;
            }
            let Learner { online, opt, .. } = &mut ens.learners[i];
            opt.step(online.params_mut(), &grads[i])?;
        }
    }
    ens.soft_update_targets();
    Ok(SelectiveOutcome { loss, anchor_counts, touched })
}

/// One equal update on a batch: every learner trains on every transition with
/// its own Huber TD error plus `alpha` times the KL supervisor. Returns the
/// sum over learners of each learner's batch-mean loss.
pub fn equal_update(ens: &mut Ensemble, batch: &[Transition], alpha: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::InvalidConfig("equal update on an empty batch".into()));
    }
    let n = ens.n_learners();
    let n_actions = ens.n_actions;
    let temp = ens.cfg.kl_temperature;
    let mut grads: Vec<Vec<f64>> = ens.learners.iter().map(|l| l.online.zero_grads()).collect();
    let mut loss = 0.0;

    for tr in batch {
        let targets = ens.td_targets(tr);
        for i in 0..n {
            let fwd = ens.learners[i].online.forward_cached(&tr.state);
            let pred = fwd.output()[tr.action];
            let mut d_out = vec![0.0; n_actions];
            loss += huber(targets[i] - pred, HUBER_DELTA);
            d_out[tr.action] = huber_grad(pred - targets[i], HUBER_DELTA);
            if alpha != 0.0 {
                if let Some(q_row) = &tr.q_star_row {
                    let logits = fwd.output();
                    let q = softmax(q_row, temp);
                    let p = softmax(logits, temp);
                    loss += alpha * kl_divergence(&p, &q);
                    for (d, g) in d_out.iter_mut().zip(kl_grad_logits(logits, &q, temp)) {
                        *d += alpha * g;
                    }
                }
            }
            ens.learners[i].online.backward(&fwd, &d_out, &mut grads[i]);
        }
    }

    let scale = 1.0 / batch.len() as f64;
    loss *= scale;
    if !loss.is_finite() {
        return Err(CoreError::NonFinite(format!("equal-update loss is {loss}")));
    }
    for i in 0..n {
        for g in &mut grads[i] {
            *g *= scale;
        }
        let Learner { online, opt, .. } = &mut ens.learners[i];
        opt.step(online.params_mut(), &grads[i])?;
    }
    ens.soft_update_targets();
    Ok(loss)
}

/// Equal pretrain over demonstration transitions for the configured number of
/// epochs. Every demonstration must carry an optimal-value row. Returns the
/// per-batch loss history.
pub fn pretrain(
    ens: &mut Ensemble,
    demos: &TransitionSet,
    alpha: &LrSchedule,
) -> Result<Vec<f64>> {
    if demos.is_empty() {
        return Err(CoreError::InvalidData("no demonstration transitions".into()));
    }
    if demos.transitions.iter().any(|t| t.q_star_row.is_none()) {
        return Err(CoreError::InvalidData(
            "demonstration transitions must carry an optimal-value row".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(ens.cfg.seed ^ 0xA5A5_5A5A_C3C3_0F0F);
    let bs = ens.cfg.batch_size;
    let mut losses = Vec::new();
    for _epoch in 0..ens.cfg.pretrain_epochs {
        let mut idx: Vec<usize> = (0..demos.len()).collect();
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(bs) {
            let batch: Vec<Transition> =
                chunk.iter().map(|&k| demos.transitions[k].clone()).collect();
            let a = alpha.at(ens.alpha_step);
            losses.push(equal_update(ens, &batch, a)?);
            ens.alpha_step += 1;
        }
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(state: Vec<f64>, action: usize, reward: f64, next: Vec<f64>, done: bool) -> Transition {
        Transition { state, action, reward, next_state: next, done, q_star_row: None }
    }

    fn tiny_cfg(n: usize, hidden: usize) -> EnsembleCfg {
        EnsembleCfg {
            n_learners: n,
            hidden_layers: vec![hidden],
            lr: LrSchedule::constant(1e-2),
            batch_size: 8,
            seed: 42,
            ..EnsembleCfg::default()
        }
    }

    #[test]
    fn etd_single_learner_is_own_huber_td() {
        let ens = Ensemble::new(3, 2, tiny_cfg(1, 4)).unwrap();
        let t = tr(vec![0.2, -0.1, 0.5], 1, 0.7, vec![0.0, 0.3, -0.2], false);
        let l = etd_matrix(&ens, &t);
        assert_eq!(l.n(), 1);
        let q_next = ens.learner(0).target.forward(&t.next_state);
        let target = 0.7 + ens.cfg().gamma * q_next.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pred = ens.q_values(0, &t.state)[1];
        assert!((l.get(0, 0) - huber(target - pred, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn etd_identical_learners_give_constant_matrix() {
        let mut ens = Ensemble::new(2, 3, tiny_cfg(4, 8)).unwrap();
        let reference = ens.learner(0).online.clone();
        for i in 0..4 {
            ens.learner_mut(i).online = reference.clone();
            ens.learner_mut(i).target = reference.clone();
        }
        let t = tr(vec![0.1, 0.9], 2, -0.3, vec![0.4, 0.2], false);
        let l = etd_matrix(&ens, &t);
        let first = l.get(0, 0);
        for i in 0..4 {
            for j in 0..4 {
                assert!((l.get(i, j) - first).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn etd_terminal_drops_bootstrap() {
        let ens = Ensemble::new(2, 2, tiny_cfg(2, 4)).unwrap();
        let t = tr(vec![0.3, 0.3], 0, 1.5, vec![9.0, 9.0], true);
        let l = etd_matrix(&ens, &t);
        for j in 0..2 {
            // Target is just r, independent of the next state.
            let pred0 = ens.q_values(0, &t.state)[0];
            assert!((l.get(0, j) - huber(1.5 - pred0, 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn etd_two_learners_match_hand_computation() {
        // 1 input, 2 actions, no hidden layer: params are [w0, w1, b0, b1]
        // and Q(x) = (w0 x + b0, w1 x + b1).
        let mut cfg = tiny_cfg(2, 0);
        cfg.hidden_layers = vec![];
        cfg.gamma = 0.9;
        let mut ens = Ensemble::new(1, 2, cfg).unwrap();
        // Online 0: Q(x) = (x + 1, 2x); Online 1: Q(x) = (0.5x, x − 1).
        ens.learner_mut(0).online.params_mut().copy_from_slice(&[1.0, 2.0, 1.0, 0.0]);
        ens.learner_mut(1).online.params_mut().copy_from_slice(&[0.5, 1.0, 0.0, -1.0]);
        // Target 0: Q(x) = (2x + 1, x); Target 1: Q(x) = (x, x + 2).
        ens.learner_mut(0).target.params_mut().copy_from_slice(&[2.0, 1.0, 1.0, 0.0]);
        ens.learner_mut(1).target.params_mut().copy_from_slice(&[1.0, 1.0, 0.0, 2.0]);
        let t = tr(vec![1.0], 0, 0.5, vec![2.0], false);
        let l = etd_matrix(&ens, &t);
        // targets: t0 = 0.5 + 0.9·max(5, 2) = 5.0; t1 = 0.5 + 0.9·max(2, 4) = 4.1
        // preds: p0 = 2, p1 = 0.5; Huber(x) = |x| − 0.5 for |x| > 1.
        assert!((l.get(0, 0) - 2.5).abs() < 1e-9);
        assert!((l.get(0, 1) - 1.6).abs() < 1e-9);
        assert!((l.get(1, 0) - 4.0).abs() < 1e-9);
        assert!((l.get(1, 1) - 3.1).abs() < 1e-9);
    }

    #[test]
    fn weight_matrix_hand_trace_window_of_one() {
        // Anchor at index 2 (third learner) of 7.
        let mut rows = vec![vec![5.0; 7]; 7];
        for i in 0..7 {
            rows[i][i] = if i == 2 { 0.1 } else { 1.0 + i as f64 };
        }
        let w = weight_matrix(&EtdMatrix::from_rows(&rows), 1);
        assert_eq!(w.i_star, 2);
        assert_eq!((w.i_min, w.i_max), (1, 3));
        assert_eq!(w.diagonal(), vec![0.0, 0.5, 1.0, 0.5, 0.0, 0.0, 0.0]);
        assert!((w.get(1, 2) - 0.25).abs() < 1e-12);
        assert!((w.get(2, 3) - 0.25).abs() < 1e-12);
        assert_eq!(w.get(1, 3), 0.0);
    }

    #[test]
    fn weight_matrix_degenerate_window_is_point_mass() {
        let rows = vec![vec![0.3]];
        let w = weight_matrix(&EtdMatrix::from_rows(&rows), 0);
        assert_eq!(w.get(0, 0), 1.0);
        let mut rows = vec![vec![1.0; 4]; 4];
        rows[2][2] = 0.01;
        let w = weight_matrix(&EtdMatrix::from_rows(&rows), 0);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if (i, j) == (2, 2) { 1.0 } else { 0.0 };
                assert_eq!(w.get(i, j), expect);
            }
        }
    }

    #[test]
    fn weight_matrix_boundary_clipping_halves_the_range() {
        // Anchor at index 0 with m=1: window [0, 1], span 1, diag (1, 0, ...).
        let mut rows = vec![vec![2.0; 5]; 5];
        for i in 0..5 {
            rows[i][i] = 0.5 + i as f64;
        }
        let w = weight_matrix(&EtdMatrix::from_rows(&rows), 1);
        assert_eq!(w.i_star, 0);
        assert_eq!((w.i_min, w.i_max), (0, 1));
        assert_eq!(w.diagonal(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        for i in 0..5 {
            for j in 0..5 {
                if (i, j) != (0, 0) {
                    assert_eq!(w.get(i, j), 0.0, "({i},{j})");
                }
            }
        }
    }

    #[test]
    fn weight_matrix_ties_break_to_lowest_index() {
        let mut rows = vec![vec![3.0; 6]; 6];
        for i in 0..6 {
            rows[i][i] = if i == 1 || i == 4 { 0.2 } else { 2.0 };
        }
        let w = weight_matrix(&EtdMatrix::from_rows(&rows), 1);
        assert_eq!(w.i_star, 1);
    }

    #[test]
    fn selective_m0_touches_only_the_anchor() {
        let mut ens = Ensemble::new(3, 2, tiny_cfg(4, 6)).unwrap();
        let t = tr(vec![0.5, -0.2, 0.1], 1, 1.0, vec![0.2, 0.2, 0.2], false);
        let l = etd_matrix(&ens, &t);
        let anchor = weight_matrix(&l, 0).i_star;
        let before: Vec<Vec<f64>> =
            ens.learners().iter().map(|l| l.online.params().to_vec()).collect();
        let out = selective_update(&mut ens, &[t], 0, 0.0).unwrap();
        for i in 0..4 {
            let changed = ens.learner(i).online.params() != before[i].as_slice();
            assert_eq!(changed, i == anchor, "learner {i}");
            assert_eq!(out.touched[i], i == anchor, "touched flag {i}");
            assert_eq!(out.anchor_counts[i], u64::from(i == anchor), "anchor count {i}");
        }
    }

    #[test]
    fn selective_full_window_equal_errors_matches_symmetric_pattern() {
        // All learners share parameters, so every TD error ties and the anchor
        // is learner 0; with m = N the window spans everyone symmetrically.
        let mut ens = Ensemble::new(2, 2, tiny_cfg(5, 4)).unwrap();
        let reference = ens.learner(0).online.clone();
        for i in 0..5 {
            ens.learner_mut(i).online = reference.clone();
            ens.learner_mut(i).target = reference.clone();
        }
        let t = tr(vec![0.3, 0.8], 0, 0.4, vec![0.1, -0.1], false);
        let l = etd_matrix(&ens, &t);
        let w = weight_matrix(&l, 5);
        assert_eq!((w.i_min, w.i_max), (0, 4));
        // Identical learners: one shared TD error value e, loss = e·ΣW.
        let e = l.get(0, 0);
        let w_sum: f64 = (0..5).flat_map(|i| (0..5).map(move |j| (i, j)))
            .map(|(i, j)| w.get(i, j))
            .sum();
        let loss = selective_update(&mut ens, &[t], 5, 0.0).unwrap().loss;
        assert!((loss - e * w_sum).abs() < 1e-9, "loss {loss} vs {}", e * w_sum);
    }

    #[test]
    fn selective_single_learner_equals_plain_dqn() {
        // Reference: plain Huber-TD DQN sharing seed and optimizer settings.
        let cfg = tiny_cfg(1, 8);
        let mut ens = Ensemble::new(3, 2, cfg.clone()).unwrap();
        let mut net = ens.learner(0).online.clone();
        let mut tgt = net.clone();
        let mut opt = Adam::new(net.param_count(), AdamCfg::with_schedule(cfg.lr));
        let pool: Vec<Transition> = (0..6)
            .map(|k| {
                let x = k as f64 / 6.0;
                tr(vec![x, 1.0 - x, 0.2], k % 2, x - 0.5, vec![1.0 - x, x, 0.1], k == 5)
            })
            .collect();
        for step in 0..100 {
            let batch = vec![pool[step % 6].clone(), pool[(step + 3) % 6].clone()];
            selective_update(&mut ens, &batch, 0, 0.0).unwrap();

            let mut grads = net.zero_grads();
            for t in &batch {
                let target = if t.done {
                    t.reward
                } else {
                    let q = tgt.forward(&t.next_state);
                    t.reward + cfg.gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                };
                let fwd = net.forward_cached(&t.state);
                let mut d_out = vec![0.0; 2];
                d_out[t.action] = huber_grad(fwd.output()[t.action] - target, 1.0);
                net.backward(&fwd, &d_out, &mut grads);
            }
            for g in &mut grads {
                *g *= 0.5;
            }
            opt.step(net.params_mut(), &grads).unwrap();
            tgt.soft_update_from(&net, cfg.tau);
        }
        let a = ens.learner(0).online.params();
        let b = net.params();
        let max_div =
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max_div <= 1e-9, "divergence {max_div}");
    }

    #[test]
    fn equal_update_alpha_zero_is_mean_huber_td() {
        let mut ens = Ensemble::new(3, 2, tiny_cfg(2, 6)).unwrap();
        let batch: Vec<Transition> = (0..4)
            .map(|k| {
                let x = k as f64 * 0.3;
                tr(vec![x, -x, 0.5], k % 2, 0.1 * k as f64, vec![x, x, x], false)
            })
            .collect();
        // Hand-compute before the update mutates parameters.
        let mut expect = 0.0;
        for t in &batch {
            let targets = ens.td_targets(t);
            for i in 0..2 {
                let pred = ens.q_values(i, &t.state)[t.action];
                expect += huber(targets[i] - pred, 1.0);
            }
        }
        expect /= batch.len() as f64;
        let loss = equal_update(&mut ens, &batch, 0.0).unwrap();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn pretrain_requires_supervision_rows() {
        let mut ens = Ensemble::new(2, 2, tiny_cfg(2, 4)).unwrap();
        let demos = TransitionSet {
            transitions: vec![tr(vec![0.1, 0.2], 0, 0.0, vec![0.0, 0.0], false)],
        };
        assert!(pretrain(&mut ens, &demos, &LrSchedule::constant(1.0)).is_err());
    }

    #[test]
    fn bandit_pretrain_converges_to_best_action() {
        // Single state, 3 actions with fixed rewards, γ → effectively 0 via
        // done=true; every learner must learn argmax = action 1.
        let mut cfg = tiny_cfg(3, 16);
        cfg.gamma = 0.99;
        cfg.pretrain_epochs = 60;
        cfg.batch_size = 3;
        let mut ens = Ensemble::new(1, 3, cfg).unwrap();
        let rewards = [1.0, 3.0, 2.0];
        let demos = TransitionSet {
            transitions: (0..3)
                .map(|a| Transition {
                    state: vec![1.0],
                    action: a,
                    reward: rewards[a],
                    next_state: vec![1.0],
                    done: true,
                    q_star_row: Some(rewards.to_vec()),
                })
                .collect(),
        };
        pretrain(&mut ens, &demos, &LrSchedule::constant(0.0)).unwrap();
        for i in 0..3 {
            assert_eq!(ens.greedy_action(i, &[1.0]), 1, "learner {i}");
        }
    }

    #[test]
    fn identical_runs_match_exactly() {
        let build = || {
            let mut ens = Ensemble::new(2, 2, tiny_cfg(2, 6)).unwrap();
            let batch: Vec<Transition> = (0..4)
                .map(|k| {
                    let x = k as f64 * 0.25;
                    tr(vec![x, 1.0 - x], k % 2, x, vec![1.0 - x, x], false)
                })
                .collect();
            for _ in 0..20 {
                selective_update(&mut ens, &batch, 1, 0.5).unwrap();
            }
            ens
        };
        let a = build();
        let b = build();
        for i in 0..2 {
            assert_eq!(a.learner(i).online.params(), b.learner(i).online.params());
            assert_eq!(a.learner(i).target.params(), b.learner(i).target.params());
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let mut ens = Ensemble::new(3, 2, tiny_cfg(2, 4)).unwrap();
        let batch =
            vec![tr(vec![0.1, 0.2, 0.3], 0, 0.5, vec![0.2, 0.1, 0.0], false)];
        selective_update(&mut ens, &batch, 1, 0.0).unwrap();
        ens.alpha_step = 17;
        ens.env_steps = 99;
        let dir = tempfile::tempdir().unwrap();
        ens.save_dir(dir.path()).unwrap();
        let back = Ensemble::load_dir(dir.path()).unwrap();
        assert_eq!(back.alpha_step, 17);
        assert_eq!(back.env_steps, 99);
        for i in 0..2 {
            assert_eq!(ens.learner(i).online.params(), back.learner(i).online.params());
            assert_eq!(ens.learner(i).target.params(), back.learner(i).target.params());
            let (m1, v1, t1) = ens.learner(i).opt.state();
            let (m2, v2, t2) = back.learner(i).opt.state();
            assert_eq!((m1, v1, t1), (m2, v2, t2));
        }
        // Continued training from the restore matches continued training
        // from the original, bit for bit.
        let mut cont_a = ens.clone();
        let mut cont_b = back;
        selective_update(&mut cont_a, &batch, 1, 0.0).unwrap();
        selective_update(&mut cont_b, &batch, 1, 0.0).unwrap();
        assert_eq!(cont_a.learner(0).online.params(), cont_b.learner(0).online.params());
    }

    #[test]
    fn soft_target_update_shrinks_geometrically() {
        let mut ens = Ensemble::new(2, 2, tiny_cfg(1, 4)).unwrap();
        // Push target away from online, then apply k frozen soft updates.
        for p in ens.learner_mut(0).target.params_mut() {
            *p += 1.0;
        }
        let gap0: f64 = ens
            .learner(0)
            .online
            .params()
            .iter()
            .zip(ens.learner(0).target.params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let k = 10;
        for _ in 0..k {
            ens.soft_update_targets();
        }
        let gap: f64 = ens
            .learner(0)
            .online
            .params()
            .iter()
            .zip(ens.learner(0).target.params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let expect = gap0 * (1.0 - ens.cfg().tau).powi(k);
        assert!((gap - expect).abs() < 1e-12, "{gap} vs {expect}");
    }
}
