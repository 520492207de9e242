//! Experience-driven training: interleaved ε-greedy rollouts feeding a ring
//! replay buffer, with selective updates on uniform batches.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::dp::{OptimalQTable, Transition};
use crate::env::FuturesEnv;
use crate::error::{CoreError, Result};

use super::{selective_update, Ensemble, ReplayBuffer};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainCfg {
    /// One epoch = one episode per collector (each learner, plus the optimal
    /// actor when a value table is supplied).
    pub epochs: usize,
    /// Run a selective update every this many environment steps.
    pub update_every: usize,
    /// Minimum buffered transitions before updates begin.
    pub min_buffer: usize,
    /// When set, the ensemble is checkpointed here after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainCfg {
    fn default() -> TrainCfg {
        TrainCfg { epochs: 1, update_every: 1, min_buffer: 512, checkpoint_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub env_steps: u64,
    pub updates: u64,
    /// Mean selective-update loss per epoch (empty entries when no update ran).
    pub epoch_mean_loss: Vec<f64>,
    /// Batch transitions anchored per learner, summed over all updates.
    pub anchor_counts: Vec<u64>,
}

impl TrainReport {
    /// Learner that anchored the most transitions (ties go to the lowest
    /// index); `None` before any update has run.
    pub fn dominant_anchor(&self) -> Option<usize> {
        if self.anchor_counts.iter().all(|&c| c == 0) {
            return None;
        }
        let mut best = 0;
        for (i, &c) in self.anchor_counts.iter().enumerate() {
            if c > self.anchor_counts[best] {
                best = i;
            }
        }
        Some(best)
    }
}

/// Train the ensemble on an environment slice. Rollouts cycle round-robin
/// through the learners (ε-greedy on each learner's own Q) and, when `table`
/// is given, the optimal actor; transitions within the table's range carry
/// its value row for the KL supervisor. A non-finite loss rolls the ensemble
/// back to the epoch-start state before the error propagates.
pub fn train_loop(
    env: &mut FuturesEnv,
    ens: &mut Ensemble,
    table: Option<&OptimalQTable>,
    cfg: &TrainCfg,
) -> Result<TrainReport> {
    if cfg.update_every == 0 {
        return Err(CoreError::InvalidConfig("update_every must be positive".into()));
    }
    if let Some(q) = table {
        let expected = env.range().end - env.range().start;
        if q.t_len() != expected || q.n_actions() != env.cfg().space.size() {
            return Err(CoreError::InvalidConfig(
                "value table does not match the environment slice".into(),
            ));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(ens.cfg().seed ^ 0x5EED_C0DE_0451_BEEF);
    let mut buffer = ReplayBuffer::new(ens.cfg().buffer_capacity);
    let n_learners = ens.n_learners();
    let n_collectors = n_learners + usize::from(table.is_some());
    let n_actions = ens.n_actions();
    let h_max = env.cfg().space.h_max();
    let m = ens.cfg().neighbor_size;
    let bs = ens.cfg().batch_size;
    let min_buffer = cfg.min_buffer.max(1);

    let mut report = TrainReport {
        env_steps: 0,
        updates: 0,
        epoch_mean_loss: Vec::with_capacity(cfg.epochs),
        anchor_counts: vec![0; n_learners],
    };
    for _epoch in 0..cfg.epochs {
        let snapshot = ens.snapshot();
        let mut loss_sum = 0.0;
        let mut loss_count = 0u64;
        for collector in 0..n_collectors {
            let mut obs = env.reset();
            let mut prev_action = 0usize;
            let mut t_off = 0usize;
            while !env.done() {
                let features = obs.features(h_max);
                let greedy = if collector < n_learners {
                    ens.greedy_action(collector, &features)
                } else {
                    table.unwrap().best_action(t_off, prev_action)
                };
                let action = if rng.gen::<f64>() < ens.current_epsilon() {
                    rng.gen_range(0..n_actions)
                } else {
                    greedy
                };
                let q_row = table.map(|q| q.row(t_off, prev_action).to_vec());
                let step = env.step(action)?;
                buffer.push(Transition {
                    state: features,
                    action,
                    reward: step.reward,
                    next_state: step.observation.features(h_max),
                    done: step.done,
                    q_star_row: q_row,
                });
                ens.env_steps += 1;
                report.env_steps += 1;
                obs = step.observation;
                prev_action = action;
                t_off += 1;

                if buffer.len() >= min_buffer && report.env_steps % cfg.update_every as u64 == 0 {
                    let batch = buffer.sample(&mut rng, bs);
                    let alpha = ens.current_alpha();
                    match selective_update(ens, &batch, m, alpha) {
                        Ok(out) => {
                            ens.alpha_step += 1;
                            report.updates += 1;
                            loss_sum += out.loss;
                            loss_count += 1;
                            for (total, c) in report.anchor_counts.iter_mut().zip(&out.anchor_counts)
                            {
                                *total += c;
                            }
                        }
                        Err(e) => {
                            *ens = snapshot;
                            return Err(e.in_stage("train-loop"));
                        }
                    }
                }
            }
        }
        report
            .epoch_mean_loss
            .push(if loss_count > 0 { loss_sum / loss_count as f64 } else { 0.0 });
        if let Some(dir) = &cfg.checkpoint_dir {
            ens.save_dir(dir)?;
        }
    }
    Ok(report)
}
