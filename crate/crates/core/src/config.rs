//! Model and run configuration.
//!
//! One flat struct carries every knob so a run can be reproduced from a
//! single JSON object. `validate` rejects structurally impossible
//! combinations before any buffer is allocated.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Deliberate defects for negative-control checks. A healthy model never
/// sets this; the verification battery uses it to prove its own checks
/// can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Attention mask lets position t read position t+1.
    LeakyAttentionMask,
    /// Router context mean includes the current position.
    AcausalPastMean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub seed: u64,

    // backbone
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub n_experts: usize,
    pub top_k_experts: usize,
    pub d_ff: usize,
    pub shared_expert: bool,
    pub rope_theta: f64,
    pub rms_eps: f64,
    pub dropout: f64,
    pub lambda_lb: f64,

    // router between columns
    pub router_rank: usize,
    pub trn_groups: usize,
    pub trn_eta: f64,
    /// One router shared by every gap instead of one per gap.
    pub share_thalamus: bool,

    // episodic memory
    pub mem_slots: usize,
    pub mem_key_dim: usize,
    pub mem_top_k: usize,
    pub mem_window: usize,
    pub mem_chunk: usize,
    pub write_top_k: usize,
    pub write_target: usize,
    pub tau_beta: f64,
    pub gamma_td: f64,
    pub delta_max: f64,
    pub slow_alpha: f64,
    pub eta_pred: f64,
    pub rho_top: f64,
    pub cos_eps: f64,

    // replay stores
    pub replay_chunk_len: usize,
    pub recent_capacity: usize,
    pub long_capacity: usize,

    // replay feedback controller
    pub ctrl_beta: f64,
    pub ctrl_g_target: f64,
    pub ctrl_kp: f64,
    pub ctrl_ki: f64,
    pub ctrl_i_max: f64,
    pub ctrl_integrator_reset: bool,
    pub lambda_rep0: f64,
    pub lambda_rep_min: f64,
    pub lambda_rep_max: f64,
    pub rho_long0: f64,
    pub k_rho: f64,
    pub replay_batch0: usize,
    pub replay_batch_min: usize,
    pub replay_batch_max: usize,
    pub k_b: f64,
    pub n_ctrl: usize,
    pub n_ctrl_batches: usize,

    // loss weights
    pub lambda_router: f64,
    pub lambda_td: f64,
    pub lambda_pred: f64,

    // optimizer
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub grad_clip: f64,
    pub grad_accum: usize,

    // lesions
    pub disable_thalamus: bool,
    pub disable_hippocampus: bool,
    pub disable_replay: bool,

    /// Test-only defect injection; see [`Fault`].
    pub fault: Option<Fault>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seed: 0,
            vocab_size: 259,
            d_model: 128,
            n_layers: 4,
            n_heads: 8,
            n_kv_heads: 4,
            n_experts: 4,
            top_k_experts: 2,
            d_ff: 256,
            shared_expert: false,
            rope_theta: 10000.0,
            rms_eps: 1e-6,
            dropout: 0.0,
            lambda_lb: 0.01,
            router_rank: 16,
            trn_groups: 4,
            trn_eta: 1.0,
            share_thalamus: false,
            mem_slots: 1024,
            mem_key_dim: 32,
            mem_top_k: 8,
            mem_window: 256,
            mem_chunk: 64,
            write_top_k: 8,
            write_target: 4,
            tau_beta: 0.9,
            gamma_td: 0.95,
            delta_max: 1.0,
            slow_alpha: 0.999,
            eta_pred: 1.0,
            rho_top: 0.5,
            cos_eps: 1e-8,
            replay_chunk_len: 32,
            recent_capacity: 4096,
            long_capacity: 4096,
            ctrl_beta: 0.2,
            ctrl_g_target: 0.02,
            ctrl_kp: 2.0,
            ctrl_ki: 0.1,
            ctrl_i_max: 5.0,
            ctrl_integrator_reset: false,
            lambda_rep0: 0.1,
            lambda_rep_min: 0.0,
            lambda_rep_max: 1.0,
            rho_long0: 0.25,
            k_rho: 1.0,
            replay_batch0: 8,
            replay_batch_min: 2,
            replay_batch_max: 32,
            k_b: 2.0,
            n_ctrl: 240,
            n_ctrl_batches: 5,
            lambda_router: 1.0,
            lambda_td: 1.0,
            lambda_pred: 1.0,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            adam_eps: 1e-8,
            warmup_steps: 1000,
            total_steps: 1320,
            grad_clip: 1.0,
            grad_accum: 1,
            disable_thalamus: false,
            disable_hippocampus: false,
            disable_replay: false,
            fault: None,
        }
    }
}

impl ModelConfig {
    /// Small config for gradient oracles: every routing and retrieval
    /// path stays exercised (k < E, chunked reads) at throwaway cost.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 17,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 1,
            n_experts: 3,
            top_k_experts: 2,
            d_ff: 24,
            router_rank: 6,
            trn_groups: 2,
            mem_slots: 16,
            mem_key_dim: 8,
            mem_top_k: 2,
            mem_window: 8,
            mem_chunk: 3,
            write_top_k: 3,
            write_target: 2,
            replay_chunk_len: 4,
            recent_capacity: 16,
            long_capacity: 16,
            replay_batch0: 2,
            replay_batch_min: 1,
            replay_batch_max: 4,
            warmup_steps: 4,
            total_steps: 40,
            ..ModelConfig::default()
        }
    }

    /// Reduced width for multi-seed comparison runs where wall clock
    /// matters more than capacity.
    pub fn compact() -> Self {
        ModelConfig {
            vocab_size: 259,
            d_model: 48,
            n_layers: 3,
            n_heads: 4,
            n_kv_heads: 2,
            n_experts: 2,
            top_k_experts: 1,
            d_ff: 96,
            router_rank: 8,
            trn_groups: 2,
            mem_slots: 256,
            mem_key_dim: 16,
            mem_top_k: 4,
            mem_window: 64,
            mem_chunk: 16,
            write_top_k: 6,
            write_target: 3,
            replay_chunk_len: 16,
            recent_capacity: 1024,
            long_capacity: 1024,
            replay_batch0: 4,
            replay_batch_min: 2,
            replay_batch_max: 8,
            n_ctrl: 30,
            warmup_steps: 30,
            ..ModelConfig::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_rep(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// 1-based index of the column whose output feeds the memory read;
    /// layers strictly above it receive the retrieval feedback.
    pub fn inject_layer(&self) -> usize {
        1.max(2 * self.n_layers / 3)
    }

    /// Group count actually used by channel competition: if the groups
    /// do not divide the router rank evenly, one global group is used.
    pub fn effective_trn_groups(&self) -> usize {
        if self.trn_groups == 0 || self.router_rank % self.trn_groups != 0 {
            1
        } else {
            self.trn_groups
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.n_layers < 2 {
            return fail(format!("n_layers {} must be at least 2", self.n_layers));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!(
                "head width {} must be even for rotary encoding",
                self.head_dim()
            ));
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_kv_heads {} must divide n_heads {}",
                self.n_kv_heads, self.n_heads
            ));
        }
        if self.top_k_experts == 0 || self.top_k_experts > self.n_experts {
            return fail(format!(
                "top_k_experts {} outside 1..={}",
                self.top_k_experts, self.n_experts
            ));
        }
        if self.d_ff == 0 || self.router_rank == 0 || self.mem_key_dim == 0 {
            return fail("d_ff, router_rank, mem_key_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.mem_slots == 0 || self.mem_top_k == 0 || self.mem_window == 0 || self.mem_chunk == 0
        {
            return fail("memory sizes must be positive".into());
        }
        if self.write_top_k == 0 || self.write_target == 0 {
            return fail("write budgets must be positive".into());
        }
        if !(0.0 < self.rho_top && self.rho_top <= 1.0) {
            return fail(format!("rho_top {} outside (0, 1]", self.rho_top));
        }
        if self.replay_chunk_len < 2 {
            return fail(format!(
                "replay_chunk_len {} needs at least one transition",
                self.replay_chunk_len
            ));
        }
        if self.recent_capacity == 0 || self.long_capacity == 0 {
            return fail("replay capacities must be positive".into());
        }
        if self.replay_batch_min == 0 || self.replay_batch_min > self.replay_batch_max {
            return fail(format!(
                "replay batch bounds [{}, {}] are empty",
                self.replay_batch_min, self.replay_batch_max
            ));
        }
        if self.lambda_rep_min > self.lambda_rep_max {
            return fail("lambda_rep bounds are empty".into());
        }
        if self.n_ctrl == 0 || self.n_ctrl_batches == 0 {
            return fail("controller cadence must be positive".into());
        }
        if self.grad_accum == 0 {
            return fail("grad_accum must be positive".into());
        }
        if self.total_steps == 0 {
            return fail("total_steps must be positive".into());
        }
        Ok(())
    }
}

/// Everything a training run needs beyond the model itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Optimizer steps spent on each task, in order.
    pub task_budgets: Vec<usize>,
    /// Evaluate all seen tasks every this many optimizer steps.
    pub eval_every: usize,
    /// Held-out batches per task for perplexity tracking.
    pub val_batches: usize,
    /// Fixed training-distribution batches per task kept for the
    /// controller's forgetting estimate.
    pub control_batches: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            batch_size: 8,
            seq_len: 64,
            task_budgets: vec![600, 600, 120],
            eval_every: 50,
            val_batches: 4,
            control_batches: 8,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(Error::Config(format!(
                "batch {}x{} cannot produce a transition",
                self.batch_size, self.seq_len
            )));
        }
        if self.task_budgets.is_empty() || self.task_budgets.iter().any(|&b| b == 0) {
            return Err(Error::Config(format!(
                "task budgets {:?} must all be positive",
                self.task_budgets
            )));
        }
        if self.eval_every == 0 || self.val_batches == 0 || self.control_batches == 0 {
            return Err(Error::Config("eval cadence and batch counts must be positive".into()));
        }
        if self.model.n_ctrl_batches > self.control_batches {
            return Err(Error::Config(format!(
                "controller wants {} batches but only {} are held",
                self.model.n_ctrl_batches, self.control_batches
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.task_budgets.iter().sum()
    }

    /// Tokens consumed per optimizer step by the main stream.
    pub fn tokens_per_step(&self) -> usize {
        self.batch_size * self.seq_len * self.model.grad_accum
    }
}
