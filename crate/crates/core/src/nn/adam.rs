//! Adaptive-moment optimizer with a linearly decaying learning rate.

use crate::error::{CoreError, Result};

/// Linear decay from `start` to `end` over `decay_steps`, then flat at `end`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> LrSchedule {
        LrSchedule { start: lr, end: lr, decay_steps: 1 }
    }

    /// Value after `t` completed steps (so the first step uses `start`).
    pub fn at(&self, t: u64) -> f64 {
        if t >= self.decay_steps {
            self.end
        } else {
            let frac = t as f64 / self.decay_steps as f64;
            self.start + (self.end - self.start) * frac
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamCfg {
    pub lr: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamCfg {
    pub fn with_schedule(lr: LrSchedule) -> AdamCfg {
        AdamCfg { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Default for AdamCfg {
    fn default() -> AdamCfg {
        AdamCfg::with_schedule(LrSchedule::constant(1e-3))
    }
}

/// Optimizer state: first/second moment accumulators plus a step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamCfg,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(param_count: usize, cfg: AdamCfg) -> Adam {
        Adam { cfg, m: vec![0.0; param_count], v: vec![0.0; param_count], t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Moment accumulators and step counter, for checkpointing.
    pub fn state(&self) -> (&[f64], &[f64], u64) {
        (&self.m, &self.v, self.t)
    }

    /// Rebuild from checkpointed state.
    pub fn restore(cfg: AdamCfg, m: Vec<f64>, v: Vec<f64>, t: u64) -> Adam {
        assert_eq!(m.len(), v.len(), "moment vectors must match");
        Adam { cfg, m, v, t }
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.lr.at(self.t)
    }

    /// One update. Rejects non-finite gradients *before* touching parameters.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter count changed under optimizer");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
            return Err(CoreError::NonFinite(format!(
                "gradient element {pos} is {}; parameters untouched",
                grads[pos]
            )));
        }
        let lr = self.cfg.lr.at(self.t);
        self.t += 1;
        let b1c = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.cfg.beta1 * self.m[i] + (1.0 - self.cfg.beta1) * grads[i];
            self.v[i] = self.cfg.beta2 * self.v[i] + (1.0 - self.cfg.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / b1c;
            let v_hat = self.v[i] / b2c;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
        }
        Ok(())
    }
}
