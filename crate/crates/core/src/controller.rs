//! Feedback controller over replay strength.
//!
//! Forgetting is measured as the gap between each past task's current
//! log-perplexity and the value recorded when that task finished. The
//! smoothed, normalized gap drives a proportional-integral law that
//! emits the replay coefficient, the long-term sampling fraction, and
//! the replay batch size, all clipped to configured bounds.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerState {
    /// Smoothed relative forgetting gap.
    pub g_ema: f64,
    /// Clipped error integral.
    pub integral: f64,
    /// Log-perplexity of each task at its completion.
    pub post_refs: BTreeMap<usize, f64>,
    /// Currently emitted actuation.
    pub lambda_rep: f64,
    pub rho_long: f64,
    pub replay_batch: usize,
}

/// One controller invocation's internals, for the step log.
#[derive(Debug, Clone, Serialize)]
pub struct ControllerTrace {
    pub f_bar: f64,
    pub g: f64,
    pub g_ema: f64,
    pub error: f64,
    pub integral: f64,
    pub lambda_rep: f64,
    pub rho_long: f64,
    pub replay_batch: usize,
}

impl ControllerState {
    pub fn new(cfg: &ModelConfig) -> Self {
        ControllerState {
            g_ema: 0.0,
            integral: 0.0,
            post_refs: BTreeMap::new(),
            lambda_rep: cfg.lambda_rep0,
            rho_long: cfg.rho_long0,
            replay_batch: cfg.replay_batch0,
        }
    }

    /// Stores a task's reference log-perplexity at completion. A repeat
    /// recording overwrites the earlier one.
    pub fn record_post_task(&mut self, task: usize, ppl: f64) -> Result<()> {
        if !(ppl > 0.0) {
            return Err(Error::Input(format!("post-task perplexity must be positive, got {ppl}")));
        }
        self.post_refs.insert(task, ppl.ln());
        Ok(())
    }

    /// One control step from freshly measured perplexities on seen
    /// tasks. `measured` maps task id to perplexity; the current task
    /// is excluded from the forgetting average. `ppl_sel` normalizes
    /// the gap (the mean over seen tasks at the call site).
    pub fn update(
        &mut self,
        cfg: &ModelConfig,
        current_task: usize,
        measured: &BTreeMap<usize, f64>,
        ppl_sel: f64,
    ) -> Result<ControllerTrace> {
        let mut f_sum = 0.0;
        let mut n_past = 0usize;
        for (&task, &ppl) in measured {
            let Some(&u_star) = self.post_refs.get(&task) else {
                return Err(Error::Input(format!("task {task} has no recorded reference")));
            };
            if task == current_task {
                continue;
            }
            if !(ppl > 0.0) {
                return Err(Error::Input(format!("measured perplexity must be positive: {ppl}")));
            }
            f_sum += (ppl.ln() - u_star).max(0.0);
            n_past += 1;
        }
        let f_bar = if n_past == 0 { 0.0 } else { f_sum / n_past as f64 };
        let g = f_bar / ppl_sel.ln().abs().max(1.0);
        self.g_ema = (1.0 - cfg.ctrl_beta) * self.g_ema + cfg.ctrl_beta * g;
        let e = (self.g_ema - cfg.ctrl_g_target).max(0.0);
        self.integral = (self.integral + e).min(cfg.ctrl_i_max);

        self.lambda_rep = (cfg.lambda_rep0 + cfg.ctrl_kp * e + cfg.ctrl_ki * self.integral)
            .clamp(cfg.lambda_rep_min, cfg.lambda_rep_max);
        self.rho_long = (cfg.rho_long0 + cfg.k_rho * e).clamp(0.0, 1.0);
        let b = (cfg.replay_batch0 as f64 * (1.0 + cfg.k_b * e)).round();
        self.replay_batch =
            (b as usize).clamp(cfg.replay_batch_min, cfg.replay_batch_max);

        Ok(ControllerTrace {
            f_bar,
            g,
            g_ema: self.g_ema,
            error: e,
            integral: self.integral,
            lambda_rep: self.lambda_rep,
            rho_long: self.rho_long,
            replay_batch: self.replay_batch,
        })
    }
}
