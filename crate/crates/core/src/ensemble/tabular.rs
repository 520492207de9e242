//! Tabular harness for the selective-update operator: finite MDPs, exact
//! value-iteration oracles, and per-dynamic learner assignment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{CoreError, Result};
use crate::nn::{huber, huber_grad};

use super::{weight_matrix, EtdMatrix};

const HUBER_DELTA: f64 = 1.0;

/// Finite MDP with deterministic transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `next[s][a]` — successor state.
    pub next: Vec<Vec<usize>>,
    /// `reward[s][a]`.
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(CoreError::InvalidConfig("MDP needs states and actions".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(CoreError::InvalidConfig("tabular gamma must be in (0, 1)".into()));
        }
        let shape_ok = self.next.len() == self.n_states
            && self.reward.len() == self.n_states
            && self.next.iter().all(|r| r.len() == self.n_actions)
            && self.reward.iter().all(|r| r.len() == self.n_actions);
        if !shape_ok {
            return Err(CoreError::InvalidConfig("MDP table shapes do not match".into()));
        }
        if self.next.iter().flatten().any(|&s| s >= self.n_states) {
            return Err(CoreError::InvalidConfig("MDP successor out of range".into()));
        }
        Ok(())
    }
}

/// Exact `Q*` by fixed-point iteration; converges geometrically since γ < 1.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<Vec<Vec<f64>>> {
    mdp.validate()?;
    let mut q = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
    loop {
        let mut delta: f64 = 0.0;
        let prev = q.clone();
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let sp = mdp.next[s][a];
                let best = prev[sp].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let v = mdp.reward[s][a] + mdp.gamma * best;
                delta = delta.max((v - q[s][a]).abs());
                q[s][a] = v;
            }
        }
        if delta < tol {
            return Ok(q);
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TabularCfg {
    pub n_learners: usize,
    pub neighbor_size: usize,
    pub lr: f64,
    /// Transitions streamed per dynamic per block.
    pub steps_per_block: usize,
    /// Dynamic-alternating blocks.
    pub blocks: usize,
    pub convergence_tol: f64,
    pub seed: u64,
}

impl Default for TabularCfg {
    fn default() -> TabularCfg {
        TabularCfg {
            n_learners: 2,
            neighbor_size: 0,
            lr: 0.5,
            steps_per_block: 250,
            blocks: 40,
            convergence_tol: 1e-3,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularReport {
    /// Learner assigned to each dynamic (anchor of its final block).
    pub assigned: Vec<usize>,
    /// `max_{s,a} |Q_assigned − Q*|` per dynamic at the end of training.
    pub sup_norm: Vec<f64>,
    /// Global transition count after which every dynamic's assigned learner
    /// was within tolerance of its oracle (checked at block boundaries).
    pub steps_to_convergence: Option<u64>,
    /// How many blocks each learner anchored, per dynamic.
    pub i_star_counts: Vec<Vec<usize>>,
    /// Learned `Q[learner][state][action]` arrays.
    pub q_tables: Vec<Vec<Vec<f64>>>,
}

/// Stream transitions dynamic-by-dynamic in alternating blocks with
/// uniform-random behavior. The anchor learner for each block is chosen by
/// the smallest *average* TD error over the block's transitions (measured
/// before updating), then the block is replayed through the selective update
/// with that weight matrix held fixed.
pub fn tabular_selective_qlearning(
    mdps: &[TabularMdp],
    cfg: &TabularCfg,
) -> Result<TabularReport> {
    if mdps.is_empty() {
        return Err(CoreError::InvalidConfig("need at least one MDP".into()));
    }
    for mdp in mdps {
        mdp.validate()?;
        if mdp.n_states != mdps[0].n_states || mdp.n_actions != mdps[0].n_actions {
            return Err(CoreError::InvalidConfig("MDPs must share state/action spaces".into()));
        }
    }
    if cfg.n_learners == 0 || cfg.lr <= 0.0 || cfg.steps_per_block == 0 || cfg.blocks == 0 {
        return Err(CoreError::InvalidConfig("bad tabular training config".into()));
    }
    let n = cfg.n_learners;
    let n_dyn = mdps.len();
    let n_actions = mdps[0].n_actions;
    let oracles: Vec<Vec<Vec<f64>>> =
        mdps.iter().map(|m| value_iteration(m, 1e-12)).collect::<Result<_>>()?;

    let mut q = vec![vec![vec![0.0; n_actions]; mdps[0].n_states]; n];
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut cur_state = vec![0usize; n_dyn];
    let mut counts = vec![vec![0usize; n]; n_dyn];
    let mut last_anchor = vec![0usize; n_dyn];
    let mut steps_to_convergence = None;
    let mut global_steps = 0u64;

    let max_q = |q_i: &Vec<Vec<f64>>, s: usize| -> f64 {
        q_i[s].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    };

    for _block in 0..cfg.blocks {
        for (d, mdp) in mdps.iter().enumerate() {
            // Roll the block's transitions first.
            let mut block_trs = Vec::with_capacity(cfg.steps_per_block);
            for _ in 0..cfg.steps_per_block {
                let s = cur_state[d];
                let a = rng.gen_range(0..n_actions);
                block_trs.push((s, a, mdp.reward[s][a], mdp.next[s][a]));
                cur_state[d] = mdp.next[s][a];
                global_steps += 1;
            }
            // Average cross-learner TD errors over the block at current Q.
            let mut rows = vec![vec![0.0; n]; n];
            for &(s, a, r, sp) in &block_trs {
                for (j, row_sum) in (0..n).map(|j| r + mdp.gamma * max_q(&q[j], sp)).enumerate() {
                    for i in 0..n {
                        rows[i][j] += huber(row_sum - q[i][s][a], HUBER_DELTA);
                    }
                }
            }
            for row in &mut rows {
                for v in row.iter_mut() {
                    *v /= block_trs.len() as f64;
                }
            }
            let w = weight_matrix(&EtdMatrix::from_rows(&rows), cfg.neighbor_size);
            counts[d][w.i_star] += 1;
            last_anchor[d] = w.i_star;
            // Replay the block through the fixed weights.
            for &(s, a, r, sp) in &block_trs {
                let targets: Vec<f64> = (0..n).map(|j| r + mdp.gamma * max_q(&q[j], sp)).collect();
                for i in 0..n {
                    let mut step = 0.0;
                    for (j, t) in targets.iter().enumerate() {
                        let wij = w.get(i, j);
                        if wij != 0.0 {
                            step += wij * huber_grad(t - q[i][s][a], HUBER_DELTA);
                        }
                    }
                    q[i][s][a] += cfg.lr * step;
                }
            }
        }
        if steps_to_convergence.is_none() {
            let ok = (0..n_dyn)
                .all(|d| sup_norm(&q[last_anchor[d]], &oracles[d]) <= cfg.convergence_tol);
            if ok {
                steps_to_convergence = Some(global_steps);
            }
        }
    }

    let assigned = last_anchor;
    let sup: Vec<f64> =
        assigned.iter().zip(&oracles).map(|(&i, oracle)| sup_norm(&q[i], oracle)).collect();
    Ok(TabularReport {
        assigned,
        sup_norm: sup,
        steps_to_convergence,
        i_star_counts: counts,
        q_tables: q,
    })
}

fn sup_norm(q: &[Vec<f64>], oracle: &[Vec<f64>]) -> f64 {
    q.iter()
        .zip(oracle)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Four-state ring MDP where action 0 earns `base` and action 1 earns `−base`.
pub fn ring_mdp(base: f64, gamma: f64) -> TabularMdp {
    let n = 4;
    TabularMdp {
        n_states: n,
        n_actions: 2,
        next: (0..n).map(|s| vec![(s + 1) % n, (s + 1) % n]).collect(),
        reward: (0..n).map(|_| vec![base, -base]).collect(),
        gamma,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_iteration_matches_closed_form_on_the_ring() {
        let q = value_iteration(&ring_mdp(1.0, 0.9), 1e-12).unwrap();
        // Always taking action 0 earns 1/(1−γ) = 10; one defection costs 2.
        for s in 0..4 {
            assert!((q[s][0] - 10.0).abs() < 1e-9);
            assert!((q[s][1] - 8.0).abs() < 1e-9);
        }
    }

    #[test]
    fn opposite_dynamics_get_distinct_specialists() {
        let mdps = [ring_mdp(1.0, 0.9), ring_mdp(-1.0, 0.9)];
        let report = tabular_selective_qlearning(&mdps, &TabularCfg::default()).unwrap();
        assert_ne!(report.assigned[0], report.assigned[1], "assignments: {:?}", report.assigned);
        for (d, mdp) in mdps.iter().enumerate() {
            let oracle = value_iteration(mdp, 1e-12).unwrap();
            let learned = &report.q_tables[report.assigned[d]];
            // Greedy policies agree with the oracle on every state.
            for s in 0..mdp.n_states {
                let oracle_greedy = if oracle[s][0] >= oracle[s][1] { 0 } else { 1 };
                let learner_greedy = if learned[s][0] >= learned[s][1] { 0 } else { 1 };
                assert_eq!(learner_greedy, oracle_greedy, "dynamic {d}, state {s}");
            }
            assert!(report.sup_norm[d] <= 5e-2, "dynamic {d}: sup {}", report.sup_norm[d]);
        }
    }

    #[test]
    fn single_learner_single_mdp_is_plain_q_learning() {
        let cfg = TabularCfg {
            n_learners: 1,
            blocks: 60,
            steps_per_block: 400,
            ..TabularCfg::default()
        };
        let report = tabular_selective_qlearning(&[ring_mdp(1.0, 0.9)], &cfg).unwrap();
        assert_eq!(report.assigned, vec![0]);
        assert!(report.sup_norm[0] <= 1e-3, "sup {}", report.sup_norm[0]);
        assert!(report.steps_to_convergence.is_some());
    }

    #[test]
    fn duplicated_mdps_still_meet_the_oracle() {
        let mdps = [ring_mdp(1.0, 0.9), ring_mdp(1.0, 0.9)];
        let cfg = TabularCfg { blocks: 60, steps_per_block: 400, ..TabularCfg::default() };
        let report = tabular_selective_qlearning(&mdps, &cfg).unwrap();
        for d in 0..2 {
            assert!(report.sup_norm[d] <= 1e-3, "dynamic {d}: sup {}", report.sup_norm[d]);
        }
    }
}
