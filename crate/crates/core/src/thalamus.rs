//! Low-rank router between columns.
//!
//! Each gap in the stack compresses the deep output of the column below
//! into a rank-r code, compares every position against the running mean
//! of its own past to get a surprise signal, blends a local path with a
//! state path gated by that surprise, applies divisive competition
//! across channel groups, and projects back to model width behind a
//! learned per-channel gate.

use crate::config::{Fault, ModelConfig};
use crate::error::Result;
use crate::param::Param;
use crate::rng::Rng;
use crate::tensor::Tape;

#[derive(Debug, Clone)]
pub struct ThalamusWeights {
    pub w_c: Param,
    pub gamma_in: Param,
    pub w_loc: Param,
    pub w_diff: Param,
    pub w_state: Param,
    pub b_state: Param,
    /// Scales the surprise contribution to the state gate; starts at 0
    /// so surprise is ignored until learned.
    pub alpha_s: Param,
    /// Pre-sigmoid mixing scalar between local and difference paths.
    pub a_diff: Param,
    pub w_trn: Param,
    pub b_trn: Param,
    pub w_back: Param,
    /// Pre-sigmoid output channel gate, one entry per model channel.
    pub g_mod: Param,
}

pub struct ThalamusOut {
    /// Modulatory signal for the next column, [B, T, d].
    pub signal: usize,
    /// Mean routing surprise over the batch (raw value, diagnostics).
    pub mean_surprise: f64,
}

impl ThalamusWeights {
    pub fn new(cfg: &ModelConfig, gap: usize, rng: &mut Rng) -> Self {
        let (d, r) = (cfg.d_model, cfg.router_rank);
        let p = format!("thal{gap}");
        ThalamusWeights {
            w_c: Param::proj(format!("{p}.w_c"), rng, d, r),
            gamma_in: Param::vector(format!("{p}.gamma_in"), r, 1.0),
            w_loc: Param::proj(format!("{p}.w_loc"), rng, r, r),
            w_diff: Param::proj(format!("{p}.w_diff"), rng, r, r),
            w_state: Param::proj(format!("{p}.w_state"), rng, r, 1),
            b_state: Param::scalar(format!("{p}.b_state"), 0.0),
            alpha_s: Param::scalar(format!("{p}.alpha_s"), 0.0),
            a_diff: Param::scalar(format!("{p}.a_diff"), 0.0),
            w_trn: Param::proj(format!("{p}.w_trn"), rng, r, r),
            b_trn: Param::vector(format!("{p}.b_trn"), r, 0.0),
            w_back: Param::proj(format!("{p}.w_back"), rng, r, d),
            g_mod: Param::vector(format!("{p}.g_mod"), d, 0.0),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.w_c,
            &self.gamma_in,
            &self.w_loc,
            &self.w_diff,
            &self.w_state,
            &self.b_state,
            &self.alpha_s,
            &self.a_diff,
            &self.w_trn,
            &self.b_trn,
            &self.w_back,
            &self.g_mod,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_c,
            &mut self.gamma_in,
            &mut self.w_loc,
            &mut self.w_diff,
            &mut self.w_state,
            &mut self.b_state,
            &mut self.alpha_s,
            &mut self.a_diff,
            &mut self.w_trn,
            &mut self.b_trn,
            &mut self.w_back,
            &mut self.g_mod,
        ]
    }

    /// Routes the deep output `c` [B, T, d] into a modulatory signal for
    /// the next column.
    pub fn forward(&self, tape: &mut Tape, cfg: &ModelConfig, c: usize) -> Result<ThalamusOut> {
        let shape = tape.shape(c).to_vec();
        let (b, t, _d) = (shape[0], shape[1], shape[2]);
        let r = cfg.router_rank;

        let w_c = self.w_c.on_tape(tape);
        let z0_pre = tape.matmul(c, w_c)?;
        let gamma_in = self.gamma_in.on_tape(tape);
        let z0 = tape.rms_norm(z0_pre, gamma_in, cfg.rms_eps)?;

        // local path
        let w_loc = self.w_loc.on_tape(tape);
        let loc_pre = tape.matmul(z0, w_loc)?;
        let z_loc = tape.silu(loc_pre);

        // running mean of the strictly-past codes; the acausal fixture
        // folds the current position in as well
        let mu = match cfg.fault {
            Some(Fault::AcausalPastMean) => {
                let past = tape.causal_past_mean(z0);
                let mut w_past = vec![0.0; t * r];
                let mut w_cur = vec![0.0; t * r];
                for ti in 0..t {
                    for j in 0..r {
                        w_past[ti * r + j] = ti as f64 / (ti + 1) as f64;
                        w_cur[ti * r + j] = 1.0 / (ti + 1) as f64;
                    }
                }
                let a = tape.mul_const_arr(past, w_past);
                let bb = tape.mul_const_arr(z0, w_cur);
                tape.add(a, bb)
            }
            _ => tape.causal_past_mean(z0),
        };

        // per-position surprise: mean squared deviation from the past
        let diff = tape.sub(z0, mu);
        let sq = tape.mul(diff, diff);
        let surprise = tape.mean_last(sq);
        let mean_surprise =
            tape.data(surprise).iter().sum::<f64>() / tape.data(surprise).len() as f64;

        // state gate blends projection, bias, and scaled surprise
        let s_col = tape.reshape(surprise, vec![b, t, 1]);
        let alpha_s = self.alpha_s.on_tape(tape);
        let s_scaled = tape.mul(s_col, alpha_s);
        let w_state = self.w_state.on_tape(tape);
        let state_proj = tape.matmul(z0, w_state)?;
        let pre_gate = tape.add(state_proj, s_scaled);
        let b_state = self.b_state.on_tape(tape);
        let pre_gate = tape.add(pre_gate, b_state);
        let g_state = tape.sigmoid(pre_gate);

        // difference path driven by the past mean
        let w_diff = self.w_diff.on_tape(tape);
        let diff_pre = tape.matmul(mu, w_diff)?;
        let z_diff = tape.silu(diff_pre);
        let g_state_wide = tape.broadcast_last(g_state, r);
        let gated = tape.mul(z_diff, g_state_wide);
        let a_diff = self.a_diff.on_tape(tape);
        let beta = tape.sigmoid(a_diff);
        let blended = tape.mul(gated, beta);
        let z1 = tape.add(z_loc, blended);

        // divisive competition across channel groups
        let w_trn = self.w_trn.on_tape(tape);
        let trn_pre = tape.matmul(z1, w_trn)?;
        let b_trn = self.b_trn.on_tape(tape);
        let trn_bias = tape.add(trn_pre, b_trn);
        let g = tape.sigmoid(trn_bias);
        let groups = cfg.effective_trn_groups();
        let per = r / groups;
        let g4 = tape.reshape(g, vec![b, t, groups, per]);
        let gmean = tape.mean_last(g4);
        let denom_flat = tape.mul_scalar(gmean, cfg.trn_eta);
        let denom_flat = tape.add_scalar(denom_flat, 1.0);
        let denom_col = tape.reshape(denom_flat, vec![b, t, groups, 1]);
        let denom = tape.broadcast_last(denom_col, per);
        let g_comp = tape.div(g4, denom);
        let g_tilde = tape.reshape(g_comp, vec![b, t, r]);
        let z2 = tape.mul(z1, g_tilde);

        // back to model width behind the channel gate
        let w_back = self.w_back.on_tape(tape);
        let back = tape.matmul(z2, w_back)?;
        let g_mod = self.g_mod.on_tape(tape);
        let gate = tape.sigmoid(g_mod);
        let signal = tape.mul(back, gate);

        Ok(ThalamusOut { signal, mean_surprise })
    }
}
