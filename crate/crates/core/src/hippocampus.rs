//! Episodic memory with deferred, surprise-gated writes.
//!
//! The module reads from a circular key/value store through an exact
//! chunked top-k scan over a recent window, scores each position with
//! fast and slow predictive heads, and queues candidate writes during
//! the forward pass. Writes are committed only at the optimizer-step
//! boundary, after backward, through frozen projections, so a forward
//! pass never observes its own writes.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::param::Param;
use crate::rng::Rng;
use crate::tensor::{quantile, topk_lastdim, Tape, Tensor};

/// Circular slot store holding projected keys and raw-width values.
#[derive(Debug, Clone)]
pub struct EpisodicMemory {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub slots: usize,
    pub key_dim: usize,
    pub dim: usize,
    pub ptr: usize,
    pub count: usize,
    /// Running write threshold; candidates must exceed it.
    pub tau: f64,
}

impl EpisodicMemory {
    pub fn new(cfg: &ModelConfig) -> Self {
        EpisodicMemory {
            keys: vec![0.0; cfg.mem_slots * cfg.mem_key_dim],
            values: vec![0.0; cfg.mem_slots * cfg.d_model],
            slots: cfg.mem_slots,
            key_dim: cfg.mem_key_dim,
            dim: cfg.d_model,
            ptr: 0,
            count: 0,
            tau: 0.0,
        }
    }

    /// Slot indices of the most recent `min(count, s_max)` entries,
    /// oldest first.
    pub fn recent_window_indices(&self, s_max: usize) -> Vec<usize> {
        let n_read = self.count.min(s_max);
        if self.count < self.slots {
            (self.count - n_read..self.count).collect()
        } else {
            (0..n_read)
                .map(|j| (self.ptr + self.slots - n_read + j) % self.slots)
                .collect()
        }
    }

    fn write(&mut self, key: &[f64], value: &[f64]) {
        let (dk, d) = (self.key_dim, self.dim);
        self.keys[self.ptr * dk..(self.ptr + 1) * dk].copy_from_slice(key);
        self.values[self.ptr * d..(self.ptr + 1) * d].copy_from_slice(value);
        self.ptr = (self.ptr + 1) % self.slots;
        self.count = (self.count + 1).min(self.slots);
    }
}

/// A training forward's write candidates, parked until the step boundary.
#[derive(Debug, Clone)]
pub struct PendingWrite {
    /// Detached hidden states, row-major [B, T, d].
    pub states: Vec<f64>,
    /// One surprise score per position, [B, T]; position 0 is always 0.
    pub surprise: Vec<f64>,
    pub batch: usize,
    pub time: usize,
}

#[derive(Debug, Clone)]
pub struct HippoWeights {
    pub w_q: Param,
    pub w_o: Param,
    /// Pre-sigmoid channel gate on the readout.
    pub g_hip: Param,
    /// Frozen write projections; the store stays nonparametric.
    pub w_k_write: Param,
    pub w_v_write: Param,
    pub pred_w1: Param,
    pub pred_b1: Param,
    pub pred_w2: Param,
    pub pred_b2: Param,
    pub val_w: Param,
    pub val_b: Param,
    pub slow_pred_w1: Param,
    pub slow_pred_b1: Param,
    pub slow_pred_w2: Param,
    pub slow_pred_b2: Param,
    pub slow_val_w: Param,
    pub slow_val_b: Param,
}

impl HippoWeights {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (d, dk) = (cfg.d_model, cfg.mem_key_dim);
        let pred_w1 = Param::proj("hippo.pred_w1", rng, d, d);
        let pred_b1 = Param::vector("hippo.pred_b1", d, 0.0);
        let pred_w2 = Param::proj("hippo.pred_w2", rng, d, d);
        let pred_b2 = Param::vector("hippo.pred_b2", d, 0.0);
        let val_w = Param::proj("hippo.val_w", rng, d, 1);
        let val_b = Param::vector("hippo.val_b", 1, 0.0);
        let frozen = |name: &str, rng: &mut Rng, rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            Param::new(name, Tensor::uniform(rng, vec![rows, cols], bound), false, false)
        };
        let slow = |name: &str, p: &Param| {
            Param::new(name, p.value.clone(), false, false)
        };
        HippoWeights {
            w_q: Param::proj("hippo.w_q", rng, d, dk),
            w_o: Param::proj("hippo.w_o", rng, d, d),
            g_hip: Param::vector("hippo.g_hip", d, 0.0),
            w_k_write: frozen("hippo.w_k_write", rng, d, dk),
            w_v_write: frozen("hippo.w_v_write", rng, d, d),
            slow_pred_w1: slow("hippo.slow_pred_w1", &pred_w1),
            slow_pred_b1: slow("hippo.slow_pred_b1", &pred_b1),
            slow_pred_w2: slow("hippo.slow_pred_w2", &pred_w2),
            slow_pred_b2: slow("hippo.slow_pred_b2", &pred_b2),
            slow_val_w: slow("hippo.slow_val_w", &val_w),
            slow_val_b: slow("hippo.slow_val_b", &val_b),
            pred_w1,
            pred_b1,
            pred_w2,
            pred_b2,
            val_w,
            val_b,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.w_q,
            &self.w_o,
            &self.g_hip,
            &self.w_k_write,
            &self.w_v_write,
            &self.pred_w1,
            &self.pred_b1,
            &self.pred_w2,
            &self.pred_b2,
            &self.val_w,
            &self.val_b,
            &self.slow_pred_w1,
            &self.slow_pred_b1,
            &self.slow_pred_w2,
            &self.slow_pred_b2,
            &self.slow_val_w,
            &self.slow_val_b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_q,
            &mut self.w_o,
            &mut self.g_hip,
            &mut self.w_k_write,
            &mut self.w_v_write,
            &mut self.pred_w1,
            &mut self.pred_b1,
            &mut self.pred_w2,
            &mut self.pred_b2,
            &mut self.val_w,
            &mut self.val_b,
            &mut self.slow_pred_w1,
            &mut self.slow_pred_b1,
            &mut self.slow_pred_w2,
            &mut self.slow_pred_b2,
            &mut self.slow_val_w,
            &mut self.slow_val_b,
        ]
    }
}

/// Per-flush write statistics for the step log.
#[derive(Debug, Clone, Default)]
pub struct FlushStats {
    pub last_n_write: usize,
    /// Writes divided by pooled candidates.
    pub keep_frac_topk: f64,
    /// Fraction of all positions whose surprise clears the threshold.
    pub write_frac_raw: f64,
}

/// What a forward pass does to the pending-write queue. The main
/// training pass parks a new candidate, a replay pass leaves the queue
/// untouched, and evaluation discards it without committing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueuePolicy {
    Enqueue,
    Leave,
    Discard,
}

/// Tape handles and raw diagnostics from one hippocampal forward.
pub struct HippoOut {
    /// Gated memory readout, [B, T, d].
    pub m: usize,
    /// Detached copy of the injected hidden state, on the tape as a
    /// constant, [B, T, d].
    pub x_const: usize,
    /// Critic loss node (scalar).
    pub td_loss: usize,
    /// Predictor term node (scalar), already scaled by its internal
    /// coefficient.
    pub pred_term: usize,
    pub mean_surprise: f64,
    pub max_surprise: f64,
    pub mean_reward: f64,
    /// Mean fast-head cosine with the next state (raw, for logs).
    pub mean_cos_fast: f64,
}

/// Weights, store, and pending queue bundled as one stateful unit.
#[derive(Debug, Clone)]
pub struct Hippocampus {
    pub weights: HippoWeights,
    pub mem: EpisodicMemory,
    pub pending: Vec<PendingWrite>,
    pub flush_stats: FlushStats,
}

impl Hippocampus {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        Hippocampus {
            weights: HippoWeights::new(cfg, rng),
            mem: EpisodicMemory::new(cfg),
            pending: Vec::new(),
            flush_stats: FlushStats::default(),
        }
    }

    /// Content read: exact top-k over the recent window, scanned in
    /// chunks, then softmax-mixed values projected behind the channel
    /// gate. An empty store yields a structural zero with no memory
    /// nodes on the tape.
    pub fn memory_read(&self, tape: &mut Tape, cfg: &ModelConfig, h_inj: usize) -> Result<usize> {
        let shape = tape.shape(h_inj).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let window = self.mem.recent_window_indices(cfg.mem_window);
        if window.is_empty() {
            return Ok(tape.zeros_const(vec![b, t, d]));
        }
        let dk = self.mem.key_dim;
        let w_q = self.weights.w_q.on_tape(tape);
        let q = tape.matmul(h_inj, w_q)?;
        let qd = tape.data(q).to_vec();

        let n_read = window.len();
        let k = cfg.mem_top_k.min(n_read);
        let chunk = cfg.mem_chunk.max(1);
        let scale = 1.0 / (dk as f64).sqrt();

        // running exact top-k per position: score descending, earlier
        // window position on ties, chunking cannot change the winner set
        let rows = b * t;
        let mut best: Vec<Vec<(f64, usize)>> = vec![Vec::with_capacity(k + 1); rows];
        let mut start = 0;
        while start < n_read {
            let end = (start + chunk).min(n_read);
            for pos in start..end {
                let slot = window[pos];
                let krow = &self.mem.keys[slot * dk..(slot + 1) * dk];
                for r in 0..rows {
                    let qrow = &qd[r * dk..(r + 1) * dk];
                    let mut s = 0.0;
                    for j in 0..dk {
                        s += qrow[j] * krow[j];
                    }
                    s *= scale;
                    let heap = &mut best[r];
                    if heap.len() == k {
                        let worst = *heap.last().expect("nonempty at capacity");
                        if !(s > worst.0) {
                            continue;
                        }
                    }
                    let mut i = heap.len();
                    while i > 0 && s > heap[i - 1].0 {
                        i -= 1;
                    }
                    heap.insert(i, (s, pos));
                    if heap.len() > k {
                        heap.pop();
                    }
                }
            }
            start = end;
        }

        // canonical order inside the selected set: oldest first
        let mut key_block = vec![0.0; rows * k * dk];
        let mut val_block = vec![0.0; rows * k * d];
        for r in 0..rows {
            let mut sel: Vec<usize> = best[r].iter().map(|&(_, pos)| pos).collect();
            sel.sort_unstable();
            debug_assert_eq!(sel.len(), k);
            for (i, &pos) in sel.iter().enumerate() {
                let slot = window[pos];
                key_block[(r * k + i) * dk..(r * k + i + 1) * dk]
                    .copy_from_slice(&self.mem.keys[slot * dk..(slot + 1) * dk]);
                val_block[(r * k + i) * d..(r * k + i + 1) * d]
                    .copy_from_slice(&self.mem.values[slot * d..(slot + 1) * d]);
            }
        }

        let scores = tape.mem_scores(q, key_block, k, scale);
        let alpha = tape.softmax_last(scores, None)?;
        let r_mix = tape.mem_mix(alpha, val_block, d);
        let w_o = self.weights.w_o.on_tape(tape);
        let proj = tape.matmul(r_mix, w_o)?;
        let g_hip = self.weights.g_hip.on_tape(tape);
        let gate = tape.sigmoid(g_hip);
        Ok(tape.mul(proj, gate))
    }

    /// Full hippocampal pass: read, predictive scoring, and the queue
    /// action the pass kind dictates.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        cfg: &ModelConfig,
        h_inj: usize,
        queue: QueuePolicy,
    ) -> Result<HippoOut> {
        let shape = tape.shape(h_inj).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let m = self.memory_read(tape, cfg, h_inj)?;
        let x_const = tape.detach(h_inj);

        let (reward, pred_raw, c_fast_mean) = self.predictive_terms(tape, cfg, x_const)?;
        let (td_loss, surprise) = self.td_terms(tape, cfg, x_const, &reward)?;
        let pred_term = tape.mul_scalar(pred_raw, cfg.eta_pred);

        let mean_surprise = surprise.iter().sum::<f64>() / surprise.len() as f64;
        let max_surprise = surprise.iter().cloned().fold(0.0, f64::max);
        let mean_reward = if reward.is_empty() {
            0.0
        } else {
            reward.iter().sum::<f64>() / reward.len() as f64
        };

        match queue {
            QueuePolicy::Enqueue => self.pending.push(PendingWrite {
                states: tape.data(x_const).to_vec(),
                surprise,
                batch: b,
                time: t,
            }),
            QueuePolicy::Leave => {}
            QueuePolicy::Discard => self.pending.clear(),
        }
        debug_assert_eq!(d, self.mem.dim);

        Ok(HippoOut {
            m,
            x_const,
            td_loss,
            pred_term,
            mean_surprise,
            max_surprise,
            mean_reward,
            mean_cos_fast: c_fast_mean,
        })
    }

    /// Fast-path cosine objective on the tape plus the raw intrinsic
    /// reward. The slow path runs off-tape; targets never carry grad.
    fn predictive_terms(
        &self,
        tape: &mut Tape,
        cfg: &ModelConfig,
        x_const: usize,
    ) -> Result<(Vec<f64>, usize, f64)> {
        let shape = tape.shape(x_const).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if t < 2 {
            let zero = tape.zeros_const(vec![1]);
            return Ok((Vec::new(), zero, 0.0));
        }
        let eps = cfg.cos_eps;
        let w = &self.weights;
        let rows = b * (t - 1);

        // fast predictor on the tape
        let w1 = w.pred_w1.on_tape(tape);
        let b1 = w.pred_b1.on_tape(tape);
        let w2 = w.pred_w2.on_tape(tape);
        let b2 = w.pred_b2.on_tape(tape);
        let flat = tape.reshape(x_const, vec![b * t, d]);
        let h1 = tape.matmul(flat, w1)?;
        let h1 = tape.add(h1, b1);
        let h1 = tape.silu(h1);
        let p = tape.matmul(h1, w2)?;
        let p = tape.add(p, b2);

        let src: Vec<usize> = (0..b)
            .flat_map(|bi| (0..t - 1).map(move |ti| bi * t + ti))
            .collect();
        let p_sel = tape.gather_rows(p, &src);
        let p_sq = tape.mul(p_sel, p_sel);
        let p_ss = tape.sum_last(p_sq);
        let p_norm = tape.sqrt(p_ss);
        let p_norm = tape.add_scalar(p_norm, eps);
        let p_norm_col = tape.reshape(p_norm, vec![rows, 1]);
        let p_norm_b = tape.broadcast_last(p_norm_col, d);
        let p_bar = tape.div(p_sel, p_norm_b);

        // normalized future activity, fixed target
        let xd = tape.data(x_const).to_vec();
        let mut x_next = vec![0.0; rows * d];
        for bi in 0..b {
            for ti in 0..t - 1 {
                let srcrow = &xd[(bi * t + ti + 1) * d..(bi * t + ti + 2) * d];
                let nrm = srcrow.iter().map(|v| v * v).sum::<f64>().sqrt() + eps;
                let dst = &mut x_next[(bi * (t - 1) + ti) * d..(bi * (t - 1) + ti + 1) * d];
                for j in 0..d {
                    dst[j] = srcrow[j] / nrm;
                }
            }
        }
        let x_next_const = tape.constant(vec![rows, d], x_next.clone());
        let prod = tape.mul(p_bar, x_next_const);
        let c_fast = tape.sum_last(prod);
        let neg = tape.mul_scalar(c_fast, -1.0);
        let gap = tape.add_scalar(neg, 1.0);
        let pred_raw = tape.mean_all(gap);

        // slow predictor entirely off the tape
        let h1s = affine_raw(&xd, b * t, d, &w.slow_pred_w1.value, &w.slow_pred_b1.value);
        let h1s = silu_raw(h1s);
        let ps = affine_raw(&h1s, b * t, d, &w.slow_pred_w2.value, &w.slow_pred_b2.value);
        let c_fast_raw = tape.data(c_fast).to_vec();
        let mut reward = vec![0.0; rows];
        for bi in 0..b {
            for ti in 0..t - 1 {
                let row = &ps[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt() + eps;
                let tgt = &x_next[(bi * (t - 1) + ti) * d..(bi * (t - 1) + ti + 1) * d];
                let mut c_slow = 0.0;
                for j in 0..d {
                    c_slow += (row[j] / nrm) * tgt[j];
                }
                let i = bi * (t - 1) + ti;
                reward[i] = (c_fast_raw[i] - c_slow).max(0.0);
            }
        }
        let c_mean = c_fast_raw.iter().sum::<f64>() / c_fast_raw.len() as f64;
        Ok((reward, pred_raw, c_mean))
    }

    /// Semi-gradient critic loss on the tape and the off-tape surprise
    /// scores. Position 0 of every sequence has surprise 0 because its
    /// writing decision needs the transition out of it.
    fn td_terms(
        &self,
        tape: &mut Tape,
        cfg: &ModelConfig,
        x_const: usize,
        reward: &[f64],
    ) -> Result<(usize, Vec<f64>)> {
        let shape = tape.shape(x_const).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if t < 2 {
            let zero = tape.zeros_const(vec![1]);
            return Ok((zero, vec![0.0; b * t]));
        }
        let w = &self.weights;
        let (gamma, dmax) = (cfg.gamma_td, cfg.delta_max);

        let flat = tape.reshape(x_const, vec![b * t, d]);
        let vw = w.val_w.on_tape(tape);
        let vb = w.val_b.on_tape(tape);
        let v = tape.matmul(flat, vw)?;
        let v = tape.add(v, vb);
        let v_raw = tape.data(v).to_vec();

        // source-state values stay live; reward and next value are targets
        let src: Vec<usize> = (0..b)
            .flat_map(|bi| (0..t - 1).map(move |ti| bi * t + ti))
            .collect();
        let v_t = tape.gather_rows(v, &src);
        let rows = b * (t - 1);
        let mut target = vec![0.0; rows];
        for bi in 0..b {
            for ti in 0..t - 1 {
                target[bi * (t - 1) + ti] = reward[bi * (t - 1) + ti] + gamma * v_raw[bi * t + ti + 1];
            }
        }
        let neg_v = tape.mul_scalar(v_t, -1.0);
        let pre = tape.add_const_arr(neg_v, target);
        let delta = tape.clip(pre, -dmax, dmax);
        let sq = tape.mul(delta, delta);
        let mean = tape.mean_all(sq);
        let td_loss = tape.mul_scalar(mean, 0.5);

        // slow residuals feed the surprise score only
        let xd = tape.data(x_const);
        let vs = affine_raw(xd, b * t, d, &w.slow_val_w.value, &w.slow_val_b.value);
        let mut surprise = vec![0.0; b * t];
        for bi in 0..b {
            for ti in 0..t - 1 {
                let delta_slow = (reward[bi * (t - 1) + ti] + gamma * vs[bi * t + ti + 1]
                    - vs[bi * t + ti])
                    .clamp(-dmax, dmax);
                surprise[bi * t + ti + 1] = delta_slow.abs();
            }
        }
        Ok((td_loss, surprise))
    }

    /// Commits queued writes: per-sequence top-k candidates, batch-pooled
    /// quantile threshold, running-threshold update, then insertion
    /// through the frozen projections. Returns the number of writes.
    pub fn flush_pending(&mut self, cfg: &ModelConfig) -> Result<usize> {
        let mut total_writes = 0usize;
        let mut total_candidates = 0usize;
        let mut over_raw = 0usize;
        let mut total_positions = 0usize;
        let items: Vec<PendingWrite> = self.pending.drain(..).collect();
        for item in items {
            let (b, t) = (item.batch, item.time);
            let k_w = cfg.write_top_k.min(t).max(1);
            let (pool_vals, pool_idx) = topk_lastdim(&item.surprise, &[b, t], k_w)?;
            let rho_keep = (cfg.write_target as f64 / k_w as f64).min(1.0);
            let tau_batch = quantile(&pool_vals, 1.0 - rho_keep)?;
            self.mem.tau = cfg.tau_beta * self.mem.tau + (1.0 - cfg.tau_beta) * tau_batch;

            let d = self.mem.dim;
            let (wk, wv) = (&self.weights.w_k_write.value, &self.weights.w_v_write.value);
            for bi in 0..b {
                let mut ts: Vec<usize> = pool_idx[bi * k_w..(bi + 1) * k_w].to_vec();
                ts.sort_unstable();
                for ti in ts {
                    total_candidates += 1;
                    if item.surprise[bi * t + ti] > self.mem.tau {
                        let x_row = &item.states[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                        let key = affine_raw_nobias(x_row, 1, d, wk);
                        let val = affine_raw_nobias(x_row, 1, d, wv);
                        self.mem.write(&key, &val);
                        total_writes += 1;
                    }
                }
            }
            over_raw += item.surprise.iter().filter(|&&s| s > self.mem.tau).count();
            total_positions += b * t;
        }
        self.flush_stats = FlushStats {
            last_n_write: total_writes,
            keep_frac_topk: if total_candidates == 0 {
                0.0
            } else {
                total_writes as f64 / total_candidates as f64
            },
            write_frac_raw: if total_positions == 0 {
                0.0
            } else {
                over_raw as f64 / total_positions as f64
            },
        };
        Ok(total_writes)
    }

    /// Exponential-moving-average tracking of the slow copies; called
    /// once per optimizer step.
    pub fn update_slow_targets(&mut self, alpha: f64) {
        fn ema(slow: &mut Param, fast: &Param, alpha: f64) {
            for (s, f) in slow.value.data.iter_mut().zip(fast.value.data.iter()) {
                *s = alpha * *s + (1.0 - alpha) * *f;
            }
        }
        let w = &mut self.weights;
        ema(&mut w.slow_pred_w1, &w.pred_w1, alpha);
        ema(&mut w.slow_pred_b1, &w.pred_b1, alpha);
        ema(&mut w.slow_pred_w2, &w.pred_w2, alpha);
        ema(&mut w.slow_pred_b2, &w.pred_b2, alpha);
        ema(&mut w.slow_val_w, &w.val_w, alpha);
        ema(&mut w.slow_val_b, &w.val_b, alpha);
    }
}

/// x·W + b over `rows` rows; W is [d_in, d_out], b is [d_out] or [1].
fn affine_raw(x: &[f64], rows: usize, d_in: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let d_out = w.shape[1];
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for i in 0..d_in {
            let xv = x[r * d_in + i];
            if xv == 0.0 {
                continue;
            }
            let wrow = &w.data[i * d_out..(i + 1) * d_out];
            let orow = &mut out[r * d_out..(r + 1) * d_out];
            for j in 0..d_out {
                orow[j] += xv * wrow[j];
            }
        }
        for j in 0..d_out {
            out[r * d_out + j] += b.data[j % b.data.len()];
        }
    }
    out
}

fn affine_raw_nobias(x: &[f64], rows: usize, d_in: usize, w: &Tensor) -> Vec<f64> {
    let d_out = w.shape[1];
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for i in 0..d_in {
            let xv = x[r * d_in + i];
            if xv == 0.0 {
                continue;
            }
            let wrow = &w.data[i * d_out..(i + 1) * d_out];
            let orow = &mut out[r * d_out..(r + 1) * d_out];
            for j in 0..d_out {
                orow[j] += xv * wrow[j];
            }
        }
    }
    out
}

fn silu_raw(mut x: Vec<f64>) -> Vec<f64> {
    // composed exactly like the tape op so an untrained slow copy
    // reproduces the fast path bit for bit
    for v in x.iter_mut() {
        *v *= crate::tensor::sigmoid(*v);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::tensor::finite_diff_check;

    fn seeded(cfg: &ModelConfig, seed: u64) -> Hippocampus {
        let mut rng = Rng::new(seed);
        Hippocampus::new(cfg, &mut rng)
    }

    /// Fills the store with `n` random rows without going through the
    /// write pipeline.
    fn prefill(h: &mut Hippocampus, rng: &mut Rng, n: usize) {
        let (dk, d) = (h.mem.key_dim, h.mem.dim);
        for _ in 0..n {
            let key: Vec<f64> = (0..dk).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let val: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
            h.mem.write(&key, &val);
        }
    }

    #[test]
    fn window_is_empty_before_any_write() {
        let cfg = ModelConfig::tiny();
        let h = seeded(&cfg, 1);
        assert!(h.mem.recent_window_indices(8).is_empty());
    }

    #[test]
    fn window_selects_most_recent_before_wrap() {
        let cfg = ModelConfig::tiny();
        let mut h = seeded(&cfg, 2);
        let mut rng = Rng::new(3);
        prefill(&mut h, &mut rng, 5);
        assert_eq!(h.mem.recent_window_indices(3), vec![2, 3, 4]);
        assert_eq!(h.mem.recent_window_indices(100), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn window_wraps_modularly_when_full() {
        let mut cfg = ModelConfig::tiny();
        cfg.mem_slots = 8;
        let mut h = seeded(&cfg, 4);
        let mut rng = Rng::new(5);
        prefill(&mut h, &mut rng, 10); // full, ptr = 2
        assert_eq!(h.mem.ptr, 2);
        assert_eq!(h.mem.recent_window_indices(3), vec![7, 0, 1]);
    }

    #[test]
    fn empty_memory_reads_exact_zero_without_query_nodes() {
        let cfg = ModelConfig::tiny();
        let h = seeded(&cfg, 6);
        let mut rng = Rng::new(7);
        let x = Tensor::uniform(&mut rng, vec![2, 3, cfg.d_model], 1.0);
        let mut tape = Tape::new();
        let hx = tape.leaf(&x);
        let m = h.memory_read(&mut tape, &cfg, hx).unwrap();
        assert!(tape.data(m).iter().all(|&v| v == 0.0));
        assert!(!h.weights.w_q.used_on(&tape));
    }

    #[test]
    fn single_slot_read_is_projected_gated_value_row() {
        let cfg = ModelConfig::tiny();
        let mut h = seeded(&cfg, 8);
        let mut rng = Rng::new(9);
        prefill(&mut h, &mut rng, 1);
        let x = Tensor::uniform(&mut rng, vec![1, 2, cfg.d_model], 1.0);
        let mut tape = Tape::new();
        let hx = tape.leaf(&x);
        let m = h.memory_read(&mut tape, &cfg, hx).unwrap();
        let d = cfg.d_model;
        let row = &h.mem.values[0..d];
        let proj = affine_raw_nobias(row, 1, d, &h.weights.w_o.value);
        for ti in 0..2 {
            for j in 0..d {
                let gate = 1.0 / (1.0 + (-h.weights.g_hip.value.data[j]).exp());
                let want = proj[j] * gate;
                let got = tape.data(m)[ti * d + j];
                assert!((got - want).abs() < 1e-12, "t={ti} j={j}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn chunked_read_matches_full_scan_exactly() {
        let mut cfg = ModelConfig::tiny();
        cfg.mem_slots = 32;
        cfg.mem_window = 32;
        let mut rng = Rng::new(10);
        let mut h = seeded(&cfg, 11);
        prefill(&mut h, &mut rng, 23);
        let x = Tensor::uniform(&mut rng, vec![2, 4, cfg.d_model], 1.0);
        let mut outs = Vec::new();
        for chunk in [1usize, 3, 23, 64] {
            let mut c = cfg.clone();
            c.mem_chunk = chunk;
            let mut tape = Tape::new();
            let hx = tape.leaf(&x);
            let m = h.memory_read(&mut tape, &c, hx).unwrap();
            outs.push(tape.data(m).to_vec());
        }
        for o in &outs[1..] {
            for (a, b) in o.iter().zip(outs[0].iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fresh_slow_copies_give_zero_reward() {
        let cfg = ModelConfig::tiny();
        let mut h = seeded(&cfg, 12);
        let mut rng = Rng::new(13);
        let x = Tensor::uniform(&mut rng, vec![2, 5, cfg.d_model], 1.0);
        let mut tape = Tape::new();
        let hx = tape.leaf(&x);
        let out = h.forward(&mut tape, &cfg, hx, QueuePolicy::Discard).unwrap();
        assert_eq!(out.mean_reward, 0.0);
    }

    #[test]
    fn fast_cosine_matches_direct_oracle() {
        let cfg = ModelConfig::tiny();
        let mut h = seeded(&cfg, 14);
        // separate the slow copies so the reward is nontrivial
        let mut drift = Rng::new(15);
        for v in h.weights.slow_pred_w2.value.data.iter_mut() {
            *v += drift.uniform(-0.3, 0.3);
        }
        let mut rng = Rng::new(16);
        let (b, t, d) = (2, 4, cfg.d_model);
        let x = Tensor::uniform(&mut rng, vec![b, t, d], 1.0);
        let mut tape = Tape::new();
        let hx = tape.leaf(&x);
        let x_const = tape.detach(hx);
        let (reward, pred_raw, _) = h.predictive_terms(&mut tape, &cfg, x_const).unwrap();

        // oracle: run both heads by hand and form the cosines
        let w = &h.weights;
        let h1 = silu_raw(affine_raw(&x.data, b * t, d, &w.pred_w1.value, &w.pred_b1.value));
        let p = affine_raw(&h1, b * t, d, &w.pred_w2.value, &w.pred_b2.value);
        let h1s =
            silu_raw(affine_raw(&x.data, b * t, d, &w.slow_pred_w1.value, &w.slow_pred_b1.value));
        let ps = affine_raw(&h1s, b * t, d, &w.slow_pred_w2.value, &w.slow_pred_b2.value);
        let cos = |a: &[f64], bb: &[f64]| {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt() + cfg.cos_eps;
            let nb = bb.iter().map(|v| v * v).sum::<f64>().sqrt() + cfg.cos_eps;
            a.iter().zip(bb).map(|(u, v)| (u / na) * (v / nb)).sum::<f64>()
        };
        let mut pred_sum = 0.0;
        for bi in 0..b {
            for ti in 0..t - 1 {
                let xn = &x.data[(bi * t + ti + 1) * d..(bi * t + ti + 2) * d];
                let cf = cos(&p[(bi * t + ti) * d..(bi * t + ti + 1) * d], xn);
                let cs = cos(&ps[(bi * t + ti) * d..(bi * t + ti + 1) * d], xn);
                let want = (cf - cs).max(0.0);
                let got = reward[bi * (t - 1) + ti];
                assert!((got - want).abs() < 1e-10, "reward b={bi} t={ti}");
                pred_sum += 1.0 - cf;
            }
        }
        let want_pred = pred_sum / (b * (t - 1)) as f64;
        assert!((tape.data(pred_raw)[0] - want_pred).abs() < 1e-10);
    }

    #[test]
    fn zero_value_heads_and_rewards_give_zero_td_and_surprise() {
        let cfg = ModelConfig::tiny();
        let mut h = seeded(&cfg, 17);
        for p in [&mut h.weights.val_w, &mut h.weights.val_b, &mut h.weights.slow_val_w,
                  &mut h.weights.slow_val_b]
        {
            for v in p.value.data.iter_mut() {
                *v = 0.0;
            }
        }
        let mut rng = Rng::new(18);
        let (b, t) = (2, 4);
        let x = Tensor::uniform(&mut rng, vec![b, t, cfg.d_model], 1.0);
        let mut tape = Tape::new();
        let hx = tape.leaf(&x);
        let x_const = tape.detach(hx);
        let reward = vec![0.0; b * (t - 1)];
        let (td, s) = h.td_terms(&mut tape, &cfg, x_const, &reward).unwrap();
        assert_eq!(tape.data(td)[0], 0.0);
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn surprise_at_first_position_is_always_zero() {
        let cfg = ModelConfig::tiny();
        let mut h = seeded(&cfg, 19);
        let mut rng = Rng::new(20);
        let (b, t) = (3, 6);
        let x = Tensor::uniform(&mut rng, vec![b, t, cfg.d_model], 2.0);
        let mut tape = Tape::new();
        let hx = tape.leaf(&x);
        let out = h.forward(&mut tape, &cfg, hx, QueuePolicy::Enqueue).unwrap();
        let _ = out;
        let item = h.pending.last().unwrap();
        for bi in 0..b {
            assert_eq!(item.surprise[bi * t], 0.0);
        }
    }

    #[test]
    fn oversized_residual_is_clipped_to_delta_max() {
        let cfg = ModelConfig::tiny();
        let mut h = seeded(&cfg, 21);
        for p in [&mut h.weights.val_w, &mut h.weights.val_b] {
            for v in p.value.data.iter_mut() {
                *v = 0.0;
            }
        }
        let mut rng = Rng::new(22);
        let (b, t) = (1, 3);
        let x = Tensor::uniform(&mut rng, vec![b, t, cfg.d_model], 1.0);
        let mut tape = Tape::new();
        let hx = tape.leaf(&x);
        let x_const = tape.detach(hx);
        let reward = vec![10.0; b * (t - 1)];
        let (td, _) = h.td_terms(&mut tape, &cfg, x_const, &reward).unwrap();
        // every residual pins at delta_max = 1, so the loss is 1/2
        assert!((tape.data(td)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn write_score_causality_holds_under_suffix_perturbation() {
        let cfg = ModelConfig::tiny();
        let mut h = seeded(&cfg, 23);
        // make the slow value head nontrivial so surprise moves
        let mut drift = Rng::new(24);
        for v in h.weights.slow_val_w.value.data.iter_mut() {
            *v += drift.uniform(-0.5, 0.5);
        }
        let mut rng = Rng::new(25);
        let (b, t, d) = (1, 7, cfg.d_model);
        let x = Tensor::uniform(&mut rng, vec![b, t, d], 1.0);
        let surprise_of = |h: &mut Hippocampus, data: &Tensor| {
            let mut tape = Tape::new();
            let hx = tape.leaf(data);
            h.pending.clear();
            h.forward(&mut tape, &cfg, hx, QueuePolicy::Enqueue).unwrap();
            h.pending.last().unwrap().surprise.clone()
        };
        let base = surprise_of(&mut h, &x);
        let cut = 4;
        let mut bumped = x.clone();
        for u in cut..t {
            for j in 0..d {
                bumped.data[u * d + j] += 0.37;
            }
        }
        let pert = surprise_of(&mut h, &bumped);
        for u in 0..cut {
            assert!(
                (base[u] - pert[u]).abs() <= 1e-9,
                "surprise at {u} moved under a suffix change"
            );
        }
        assert!((0..t).any(|u| (base[u] - pert[u]).abs() > 0.0));
    }

    #[test]
    fn flush_threshold_follows_interpolated_quantile() {
        let mut cfg = ModelConfig::tiny();
        cfg.write_top_k = 2;
        cfg.write_target = 1;
        cfg.tau_beta = 0.9;
        let mut h = seeded(&cfg, 26);
        let d = cfg.d_model;
        let (b, t) = (2, 3);
        let mut surprise = vec![0.0; b * t];
        // row tops: {4, 3} and {2, 1}; pool {1, 2, 3, 4}, median 2.5
        surprise[1] = 4.0;
        surprise[2] = 3.0;
        surprise[t + 1] = 2.0;
        surprise[t + 2] = 1.0;
        h.pending.push(PendingWrite {
            states: vec![0.1; b * t * d],
            surprise,
            batch: b,
            time: t,
        });
        let n = h.flush_pending(&cfg).unwrap();
        let want_tau = 0.9 * 0.0 + 0.1 * 2.5;
        assert!((h.mem.tau - want_tau).abs() < 1e-12);
        // all four candidates exceed 0.25
        assert_eq!(n, 4);
        assert_eq!(h.mem.count, 4);
        assert!(h.pending.is_empty());
        assert_eq!(h.flush_stats.last_n_write, 4);
    }

    #[test]
    fn silent_batch_writes_nothing_but_empties_queue() {
        let cfg = ModelConfig::tiny();
        let mut h = seeded(&cfg, 27);
        h.mem.tau = 0.5;
        let (b, t, d) = (2, 4, cfg.d_model);
        h.pending.push(PendingWrite {
            states: vec![0.0; b * t * d],
            surprise: vec![0.0; b * t],
            batch: b,
            time: t,
        });
        let n = h.flush_pending(&cfg).unwrap();
        assert_eq!(n, 0);
        assert_eq!(h.mem.count, 0);
        assert!(h.pending.is_empty());
        // threshold still relaxes toward the all-zero batch quantile
        assert!(h.mem.tau < 0.5);
    }

    #[test]
    fn writes_wrap_circularly_at_capacity() {
        let mut cfg = ModelConfig::tiny();
        cfg.mem_slots = 8;
        cfg.write_top_k = 3;
        cfg.write_target = 3;
        cfg.tau_beta = 0.0;
        let mut h = seeded(&cfg, 28);
        let mut rng = Rng::new(29);
        prefill(&mut h, &mut rng, 14); // ptr = 6, full
        assert_eq!(h.mem.ptr, 6);
        let (b, t, d) = (1, 4, cfg.d_model);
        let mut surprise = vec![0.0; t];
        surprise[1] = 5.0;
        surprise[2] = 6.0;
        surprise[3] = 7.0;
        let marker = 9.25;
        h.pending.push(PendingWrite {
            states: vec![marker; b * t * d],
            surprise,
            batch: b,
            time: t,
        });
        // rho_keep = 1 makes tau_batch the pool minimum, tau = 5 exactly,
        // so strictly-greater admits the 6 and 7 candidates
        let n = h.flush_pending(&cfg).unwrap();
        assert_eq!(n, 2);
        assert_eq!(h.mem.ptr, 0);
        let want = affine_raw_nobias(&vec![marker; d], 1, d, &h.weights.w_v_write.value);
        for (slot, _) in [(6usize, 0), (7usize, 1)] {
            for j in 0..d {
                assert_eq!(h.mem.values[slot * d + j], want[j]);
            }
        }
    }

    #[test]
    fn slow_targets_track_by_exponential_average() {
        let cfg = ModelConfig::tiny();
        let mut h = seeded(&cfg, 30);
        let before = h.weights.slow_pred_w1.value.data.clone();
        h.update_slow_targets(1.0);
        assert_eq!(h.weights.slow_pred_w1.value.data, before);

        for v in h.weights.pred_w1.value.data.iter_mut() {
            *v = 1.0;
        }
        for v in h.weights.slow_pred_w1.value.data.iter_mut() {
            *v = 0.0;
        }
        h.update_slow_targets(0.999);
        for &v in &h.weights.slow_pred_w1.value.data {
            assert!((v - 0.001).abs() < 1e-15);
        }
        h.update_slow_targets(0.0);
        assert_eq!(h.weights.slow_pred_w1.value.data, h.weights.pred_w1.value.data);
    }

    #[test]
    fn write_projections_are_not_trainable() {
        let cfg = ModelConfig::tiny();
        let h = seeded(&cfg, 31);
        assert!(!h.weights.w_k_write.trainable);
        assert!(!h.weights.w_v_write.trainable);
        assert!(!h.weights.slow_val_w.trainable);
        assert!(!h.weights.slow_pred_w1.trainable);
    }

    #[test]
    fn eval_forward_clears_pending_without_committing() {
        let cfg = ModelConfig::tiny();
        let mut h = seeded(&cfg, 32);
        let mut rng = Rng::new(33);
        let x = Tensor::uniform(&mut rng, vec![1, 4, cfg.d_model], 1.0);
        let mut tape = Tape::new();
        let hx = tape.leaf(&x);
        h.forward(&mut tape, &cfg, hx, QueuePolicy::Enqueue).unwrap();
        h.forward(&mut tape, &cfg, hx, QueuePolicy::Enqueue).unwrap();
        assert_eq!(h.pending.len(), 2);
        assert_eq!(h.mem.count, 0);
        h.forward(&mut tape, &cfg, hx, QueuePolicy::Leave).unwrap();
        assert_eq!(h.pending.len(), 2);
        h.forward(&mut tape, &cfg, hx, QueuePolicy::Discard).unwrap();
        assert!(h.pending.is_empty());
        assert_eq!(h.mem.count, 0);
    }

    #[test]
    fn read_path_gradients_match_finite_differences() {
        let mut cfg = ModelConfig::tiny();
        cfg.mem_slots = 16;
        let mut h = seeded(&cfg, 34);
        let mut rng = Rng::new(35);
        prefill(&mut h, &mut rng, 9);
        let x = Tensor::uniform(&mut rng, vec![1, 4, cfg.d_model], 0.8).with_grad();
        let picks: Vec<Tensor> = vec![
            x,
            h.weights.w_q.value.clone().with_grad(),
            h.weights.w_o.value.clone().with_grad(),
            h.weights.g_hip.value.clone().with_grad(),
        ];
        let err = finite_diff_check(
            |tape, ids| {
                h.weights.w_q.preset(tape.generation(), ids[1]);
                h.weights.w_o.preset(tape.generation(), ids[2]);
                h.weights.g_hip.preset(tape.generation(), ids[3]);
                let m = h.memory_read(tape, &cfg, ids[0])?;
                Ok(tape.mean_all(m))
            },
            &picks,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "read path grad error {err}");
    }

    #[test]
    fn predictor_gradients_match_finite_differences() {
        let cfg = ModelConfig::tiny();
        let h = seeded(&cfg, 36);
        let mut rng = Rng::new(37);
        let x = Tensor::uniform(&mut rng, vec![2, 4, cfg.d_model], 0.8);
        let picks: Vec<Tensor> = vec![
            h.weights.pred_w1.value.clone().with_grad(),
            h.weights.pred_b1.value.clone().with_grad(),
            h.weights.pred_w2.value.clone().with_grad(),
            h.weights.pred_b2.value.clone().with_grad(),
        ];
        let err = finite_diff_check(
            |tape, ids| {
                h.weights.pred_w1.preset(tape.generation(), ids[0]);
                h.weights.pred_b1.preset(tape.generation(), ids[1]);
                h.weights.pred_w2.preset(tape.generation(), ids[2]);
                h.weights.pred_b2.preset(tape.generation(), ids[3]);
                let x_const = tape.constant(x.shape.clone(), x.data.clone());
                let (_, pred_raw, _) = h.predictive_terms(tape, &cfg, x_const)?;
                Ok(pred_raw)
            },
            &picks,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "predictor grad error {err}");
    }

    /// The critic loss treats reward and the next-state value as fixed
    /// targets, so its gradient has the closed form
    /// -delta_t * x_t / N on unclipped positions. Finite differences
    /// would disagree here by construction, so this checks the
    /// semi-gradient directly.
    #[test]
    fn td_gradient_matches_semi_gradient_oracle() {
        let cfg = ModelConfig::tiny();
        let h = seeded(&cfg, 38);
        let mut rng = Rng::new(39);
        let (b, t, d) = (2, 5, cfg.d_model);
        let x = Tensor::uniform(&mut rng, vec![b, t, d], 0.8);
        let reward: Vec<f64> = (0..b * (t - 1)).map(|_| rng.uniform(0.0, 0.05)).collect();

        let mut tape = Tape::new();
        let x_const = tape.constant(x.shape.clone(), x.data.clone());
        let (td, _) = h.td_terms(&mut tape, &cfg, x_const, &reward).unwrap();
        tape.backward(td).unwrap();
        let got_w = h.weights.val_w.grad_on(&tape).unwrap().to_vec();
        let got_b = h.weights.val_b.grad_on(&tape).unwrap().to_vec();

        // recompute values and residuals by hand
        let vs = affine_raw(&x.data, b * t, d, &h.weights.val_w.value, &h.weights.val_b.value);
        let n = (b * (t - 1)) as f64;
        let mut want_w = vec![0.0; d];
        let mut want_b = 0.0;
        for bi in 0..b {
            for ti in 0..t - 1 {
                let delta = (reward[bi * (t - 1) + ti] + cfg.gamma_td * vs[bi * t + ti + 1]
                    - vs[bi * t + ti])
                    .clamp(-cfg.delta_max, cfg.delta_max);
                // d(td)/d(V_t) = -delta/N wherever the clip is inactive
                let inner = reward[bi * (t - 1) + ti] + cfg.gamma_td * vs[bi * t + ti + 1]
                    - vs[bi * t + ti];
                if inner.abs() <= cfg.delta_max {
                    for j in 0..d {
                        want_w[j] += -delta / n * x.data[(bi * t + ti) * d + j];
                    }
                    want_b += -delta / n;
                }
            }
        }
        for j in 0..d {
            assert!((got_w[j] - want_w[j]).abs() < 1e-10, "val_w[{j}]");
        }
        assert!((got_b[0] - want_b).abs() < 1e-10, "val_b");
    }
}
