//! Full decoder assembly.
//!
//! Token embeddings feed a stack of attention/expert columns. Each gap
//! in the early stack is bridged by a low-rank router; at the split
//! point the hippocampus reads its episodic store and a gated feedback
//! path turns the readout into an additive bias on the same modulatory
//! channel for every late column. The output head is tied to the token
//! embedding. One type owns all of it plus the replay stores, so a
//! forward pass has exclusive access to every piece of mutable state.

use crate::column::{causal_mask, ColumnWeights};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::hippocampus::{Hippocampus, HippoOut, QueuePolicy};
use crate::param::Param;
use crate::replay::ReplayStores;
use crate::rng::Rng;
use crate::tensor::Tape;
use crate::thalamus::ThalamusWeights;

/// Row-major token block with an explicit row stride so callers can
/// hand over strided views; the model only accepts contiguous ones.
#[derive(Debug, Clone)]
pub struct TokenMatrix {
    pub data: Vec<i64>,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
}

impl TokenMatrix {
    pub fn contiguous(data: Vec<i64>, rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "token block shape mismatch");
        TokenMatrix { data, rows, cols, row_stride: cols }
    }

    pub fn from_u32(tokens: &[u32], rows: usize, cols: usize) -> Self {
        TokenMatrix::contiguous(tokens.iter().map(|&t| t as i64).collect(), rows, cols)
    }

    pub fn is_contiguous(&self) -> bool {
        self.row_stride == self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.row_stride + c]
    }

    /// Next-token targets for a token block: shift left, pad the last
    /// position of each row with the ignore marker.
    pub fn shifted_targets(&self) -> TokenMatrix {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols - 1 {
                out.push(self.get(r, c + 1));
            }
            out.push(IGNORE);
        }
        TokenMatrix::contiguous(out, self.rows, self.cols)
    }
}

/// Label value excluded from the language-model loss.
pub const IGNORE: i64 = -1;

/// What kind of pass is running; controls dropout, queue policy, and
/// store mutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassKind {
    Train,
    Replay,
    Eval,
}

/// Gated projection turning the memory readout into late-stack bias.
#[derive(Debug, Clone)]
pub struct FeedbackWeights {
    pub w_gate: Param,
    pub b_gate: Param,
    pub a_hip: Param,
    pub w_hip_thal: Param,
}

impl FeedbackWeights {
    fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        FeedbackWeights {
            w_gate: Param::proj("fb.w_gate", rng, 2 * d, d),
            b_gate: Param::vector("fb.b_gate", d, 0.0),
            a_hip: Param::scalar("fb.a_hip", 0.0),
            w_hip_thal: Param::proj("fb.w_hip_thal", rng, d, d),
        }
    }
}

/// Everything a forward pass leaves on the tape, plus raw diagnostics.
pub struct NetOut {
    /// [B, T, V]
    pub logits: usize,
    /// Summed load-balance penalties across columns (tape scalar).
    pub lb_sum: usize,
    pub hippo: Option<HippoOut>,
    /// Mean router surprise across gaps (raw, 0 when no router ran).
    pub router_surprise: f64,
    /// Total expert applications in this pass.
    pub expert_evals: usize,
}

/// Scalar view of one combined objective evaluation.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// Tape node of the full objective.
    pub total: usize,
    pub lm: f64,
    pub lb: f64,
    pub td: f64,
    pub pred: f64,
    /// Replay cross-entropy; absent when nothing was sampled.
    pub rep: Option<f64>,
    pub total_value: f64,
    pub router_surprise: f64,
    pub mean_surprise: f64,
    pub max_surprise: f64,
    pub mean_reward: f64,
    pub mean_cos_fast: f64,
    pub expert_evals: usize,
}

#[derive(Debug, Clone)]
pub struct CortexNet {
    pub cfg: ModelConfig,
    pub embedding: Param,
    pub final_norm: Param,
    pub columns: Vec<ColumnWeights>,
    /// One per gap, or a single shared instance; empty when the
    /// thalamic route is ablated.
    pub routers: Vec<ThalamusWeights>,
    pub hippo: Option<Hippocampus>,
    pub feedback: Option<FeedbackWeights>,
    pub replay: ReplayStores,
    /// Dropout noise; untouched by evaluation passes.
    pub rng: Rng,
}

impl CortexNet {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let master = Rng::new(cfg.seed);
        // fixed derivation tags keep each component's initialization
        // identical across ablation variants
        let mut emb_rng = master.derive(1);
        let embedding = Param::new(
            "embedding",
            crate::tensor::Tensor::uniform(&mut emb_rng, vec![cfg.vocab_size, cfg.d_model], 0.02),
            true,
            false,
        );
        let final_norm = Param::vector("final_norm", cfg.d_model, 1.0);
        let columns = (1..=cfg.n_layers)
            .map(|l| ColumnWeights::new(cfg, l, &mut master.derive(10 + l as u64)))
            .collect();
        let routers = if cfg.disable_thalamus {
            Vec::new()
        } else if cfg.share_thalamus {
            vec![ThalamusWeights::new(cfg, 1, &mut master.derive(101))]
        } else {
            (1..cfg.n_layers)
                .map(|g| ThalamusWeights::new(cfg, g, &mut master.derive(100 + g as u64)))
                .collect()
        };
        let (hippo, feedback) = if cfg.disable_hippocampus {
            (None, None)
        } else {
            (
                Some(Hippocampus::new(cfg, &mut master.derive(200))),
                Some(FeedbackWeights::new(cfg, &mut master.derive(300))),
            )
        };
        let replay = ReplayStores::new(
            cfg.replay_chunk_len,
            cfg.recent_capacity,
            cfg.long_capacity,
            master.derive(500),
        );
        Ok(CortexNet {
            cfg: cfg.clone(),
            embedding,
            final_norm,
            columns,
            routers,
            hippo,
            feedback,
            replay,
            rng: master.derive(400),
        })
    }

    /// Replay is hippocampal machinery; ablating the hippocampus takes
    /// the stores and the replay loss with it.
    pub fn replay_active(&self) -> bool {
        !self.cfg.disable_replay && !self.cfg.disable_hippocampus
    }

    fn validate_tokens(&self, x: &TokenMatrix) -> Result<()> {
        if x.rows == 0 || x.cols == 0 {
            return Err(Error::Input("empty token block".into()));
        }
        if !x.is_contiguous() {
            return Err(Error::Input(format!(
                "token block must be contiguous: stride {} over {} columns",
                x.row_stride, x.cols
            )));
        }
        let v = self.cfg.vocab_size as i64;
        for r in 0..x.rows {
            for c in 0..x.cols {
                let id = x.get(r, c);
                if id < 0 || id >= v {
                    return Err(Error::Input(format!(
                        "token {id} at ({r},{c}) outside vocabulary of {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn validate_targets(&self, x: &TokenMatrix, y: &TokenMatrix) -> Result<()> {
        if !y.is_contiguous() {
            return Err(Error::Input(format!(
                "targets must be contiguous: stride {} over {} columns",
                y.row_stride, y.cols
            )));
        }
        if y.rows != x.rows || y.cols != x.cols {
            return Err(Error::Dimension {
                op: "targets",
                lhs: vec![x.rows, x.cols],
                rhs: vec![y.rows, y.cols],
            });
        }
        Ok(())
    }

    /// Keeps the strongest ceil(rho_top*d) gate channels per token,
    /// ties resolved toward the lower channel index.
    fn top_frac_mask(gate: &[f64], rows: usize, d: usize, rho_top: f64) -> Vec<f64> {
        let keep = ((rho_top * d as f64).ceil() as usize).clamp(1, d);
        let mut mask = vec![0.0; rows * d];
        let mut order: Vec<usize> = Vec::with_capacity(d);
        for r in 0..rows {
            let row = &gate[r * d..(r + 1) * d];
            order.clear();
            order.extend(0..d);
            order.sort_by(|&a, &b| {
                row[b].partial_cmp(&row[a]).expect("gate is finite").then(a.cmp(&b))
            });
            for &j in &order[..keep] {
                mask[r * d + j] = 1.0;
            }
        }
        mask
    }

    /// Sparse-gated feedback: F = sigmoid(a) * ((G (x) M) W), with G
    /// computed from the detached cortical state and the readout.
    fn hippo_feedback(&self, tape: &mut Tape, x_const: usize, m: usize) -> Result<usize> {
        let fb = self.feedback.as_ref().expect("feedback weights exist with the hippocampus");
        let shape = tape.shape(x_const).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let cat = tape.concat_last(x_const, m)?;
        let w_gate = fb.w_gate.on_tape(tape);
        let pre = tape.matmul(cat, w_gate)?;
        let b_gate = fb.b_gate.on_tape(tape);
        let pre = tape.add(pre, b_gate);
        let g = tape.sigmoid(pre);
        let mask = Self::top_frac_mask(tape.data(g), b * t, d, self.cfg.rho_top);
        let g_sparse = tape.mul_const_arr(g, mask);
        let gm = tape.mul(g_sparse, m);
        let w_ht = fb.w_hip_thal.on_tape(tape);
        let proj = tape.matmul(gm, w_ht)?;
        let a_hip = fb.a_hip.on_tape(tape);
        let scale = tape.sigmoid(a_hip);
        Ok(tape.mul(proj, scale))
    }

    /// Runs the stack from an embedded input node. Exposed separately
    /// so probes can differentiate with respect to the embeddings.
    pub fn forward_hidden(&mut self, tape: &mut Tape, h0: usize, kind: PassKind) -> Result<NetOut> {
        let t = tape.shape(h0)[1];
        let mask = causal_mask(t, self.cfg.fault);
        let train = !matches!(kind, PassKind::Eval);
        let queue = match kind {
            PassKind::Train => QueuePolicy::Enqueue,
            PassKind::Replay => QueuePolicy::Leave,
            PassKind::Eval => QueuePolicy::Discard,
        };
        let inj = self.cfg.inject_layer();
        let cfg = self.cfg.clone();

        let mut h = h0;
        let mut lb_sum: Option<usize> = None;
        let mut f_thal: Option<usize> = None;
        let mut f_hip: Option<usize> = None;
        let mut hippo_out: Option<HippoOut> = None;
        let mut surprise_sum = 0.0;
        let mut surprise_n = 0usize;
        let mut expert_evals = 0usize;

        for l in 1..=cfg.n_layers {
            let modulation = if l == 1 {
                None
            } else if l <= inj {
                f_thal
            } else {
                match (f_thal, f_hip) {
                    (Some(a), Some(b)) => Some(tape.add(a, b)),
                    (a, b) => a.or(b),
                }
            };
            let out = self.columns[l - 1].forward(
                tape,
                &cfg,
                h,
                modulation,
                &mask,
                train,
                &mut self.rng,
            )?;
            h = out.hidden;
            expert_evals += out.expert_evals;
            lb_sum = Some(match lb_sum {
                None => out.lb_penalty,
                Some(p) => tape.add(p, out.lb_penalty),
            });
            if l < cfg.n_layers && !cfg.disable_thalamus {
                let router =
                    if cfg.share_thalamus { &self.routers[0] } else { &self.routers[l - 1] };
                let tout = router.forward(tape, &cfg, out.routed)?;
                f_thal = Some(tout.signal);
                surprise_sum += tout.mean_surprise;
                surprise_n += 1;
            } else {
                f_thal = None;
            }
            if l == inj && !cfg.disable_hippocampus {
                let hippo = self.hippo.as_mut().expect("hippocampus exists unless ablated");
                let hout = hippo.forward(tape, &cfg, h, queue)?;
                f_hip = Some(self.hippo_feedback(tape, hout.x_const, hout.m)?);
                hippo_out = Some(hout);
            }
        }

        let gamma = self.final_norm.on_tape(tape);
        let hn = tape.rms_norm(h, gamma, cfg.rms_eps)?;
        let flat = tape.reshape(hn, vec![tape.shape(hn)[0] * t, cfg.d_model]);
        let emb = self.embedding.on_tape(tape);
        let head = tape.permute(emb, &[1, 0]);
        let logits2 = tape.matmul(flat, head)?;
        let bsz = tape.shape(h0)[0];
        let logits = tape.reshape(logits2, vec![bsz, t, cfg.vocab_size]);

        Ok(NetOut {
            logits,
            lb_sum: lb_sum.expect("at least one column"),
            hippo: hippo_out,
            router_surprise: if surprise_n == 0 { 0.0 } else { surprise_sum / surprise_n as f64 },
            expert_evals,
        })
    }

    /// Embeds a validated token block onto the tape.
    fn embed(&self, tape: &mut Tape, x: &TokenMatrix) -> Result<usize> {
        let idx: Vec<usize> = x.data.iter().map(|&t| t as usize).collect();
        let emb = self.embedding.on_tape(tape);
        let rows = tape.gather_rows(emb, &idx);
        Ok(tape.reshape(rows, vec![x.rows, x.cols, self.cfg.d_model]))
    }

    /// One pass over a token block. Training passes with targets park a
    /// pending hippocampal write and feed the replay stores; replay
    /// passes touch nothing; evaluation clears the pending queue and
    /// mutates nothing else.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: &TokenMatrix,
        targets: Option<&TokenMatrix>,
        kind: PassKind,
    ) -> Result<(NetOut, Option<usize>)> {
        self.validate_tokens(x)?;
        if let Some(y) = targets {
            self.validate_targets(x, y)?;
        }
        let h0 = self.embed(tape, x)?;
        let out = self.forward_hidden(tape, h0, kind)?;
        let loss = match targets {
            Some(y) => {
                let flat = tape.reshape(out.logits, vec![x.rows * x.cols, self.cfg.vocab_size]);
                Some(tape.cross_entropy(flat, &y.data, IGNORE)?)
            }
            None => None,
        };
        if kind == PassKind::Train && targets.is_some() && self.replay_active() {
            let tokens: Vec<u32> = x.data.iter().map(|&t| t as u32).collect();
            let chunks =
                ReplayStores::chunk_tokens(&tokens, x.rows, x.cols, self.cfg.replay_chunk_len);
            if !chunks.is_empty() {
                self.replay.push_chunks(chunks);
            }
        }
        Ok((out, loss))
    }

    /// The combined objective on one micro-batch: language modeling,
    /// router balance, critic, predictor, and (when chunks were
    /// sampled) the replay term.
    pub fn total_loss(
        &mut self,
        tape: &mut Tape,
        x: &TokenMatrix,
        y: &TokenMatrix,
        x_rep: Option<&TokenMatrix>,
        lambda_rep: f64,
    ) -> Result<LossBreakdown> {
        let (out, lm) = self.forward(tape, x, Some(y), PassKind::Train)?;
        let lm = lm.expect("targets were supplied");
        let cfg = self.cfg.clone();

        let mut total = lm;
        let lb_term = tape.mul_scalar(out.lb_sum, cfg.lambda_router);
        total = tape.add(total, lb_term);

        let (mut td_v, mut pred_v) = (0.0, 0.0);
        let mut router_surprise = out.router_surprise;
        let (mut mean_s, mut max_s, mut mean_r, mut mean_c) = (0.0, 0.0, 0.0, 0.0);
        if let Some(h) = &out.hippo {
            let td_term = tape.mul_scalar(h.td_loss, cfg.lambda_td);
            total = tape.add(total, td_term);
            let pred_term = tape.mul_scalar(h.pred_term, cfg.lambda_pred);
            total = tape.add(total, pred_term);
            td_v = tape.data(h.td_loss)[0];
            pred_v = tape.data(h.pred_term)[0];
            mean_s = h.mean_surprise;
            max_s = h.max_surprise;
            mean_r = h.mean_reward;
            mean_c = h.mean_cos_fast;
        }

        let mut rep_v = None;
        if let Some(xr) = x_rep {
            if xr.rows > 0 {
                let yr = xr.shifted_targets();
                let (rep_out, rep_loss) = self.forward(tape, xr, Some(&yr), PassKind::Replay)?;
                router_surprise = 0.5 * (router_surprise + rep_out.router_surprise);
                let rep_loss = rep_loss.expect("replay targets were supplied");
                rep_v = Some(tape.data(rep_loss)[0]);
                let rep_term = tape.mul_scalar(rep_loss, lambda_rep);
                total = tape.add(total, rep_term);
            }
        }

        Ok(LossBreakdown {
            total,
            lm: tape.data(lm)[0],
            lb: tape.data(out.lb_sum)[0],
            td: td_v,
            pred: pred_v,
            rep: rep_v,
            total_value: tape.data(total)[0],
            router_surprise,
            mean_surprise: mean_s,
            max_surprise: max_s,
            mean_reward: mean_r,
            mean_cos_fast: mean_c,
            expert_evals: out.expert_evals,
        })
    }

    /// Every parameter in a fixed order; the optimizer and checkpoint
    /// layouts both key off this sequence.
    pub fn params(&self) -> Vec<&Param> {
        let mut ps = vec![&self.embedding, &self.final_norm];
        for c in &self.columns {
            ps.extend(c.params());
        }
        for r in &self.routers {
            ps.extend(r.params());
        }
        if let Some(h) = &self.hippo {
            ps.extend(h.weights.params());
        }
        if let Some(f) = &self.feedback {
            ps.extend([&f.w_gate, &f.b_gate, &f.a_hip, &f.w_hip_thal]);
        }
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps: Vec<&mut Param> = vec![&mut self.embedding, &mut self.final_norm];
        for c in &mut self.columns {
            ps.extend(c.params_mut());
        }
        for r in &mut self.routers {
            ps.extend(r.params_mut());
        }
        if let Some(h) = &mut self.hippo {
            ps.extend(h.weights.params_mut());
        }
        if let Some(f) = &mut self.feedback {
            ps.extend([&mut f.w_gate, &mut f.b_gate, &mut f.a_hip, &mut f.w_hip_thal]);
        }
        ps
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    /// Splits trainable parameters by whether the given tape assigned
    /// them a gradient. Frozen buffers are excluded up front.
    pub fn grad_coverage(&self, tape: &Tape) -> (Vec<String>, Vec<String>) {
        let mut covered = Vec::new();
        let mut uncovered = Vec::new();
        for p in self.params() {
            if !p.trainable {
                continue;
            }
            if p.grad_on(tape).is_some() {
                covered.push(p.name.clone());
            } else {
                uncovered.push(p.name.clone());
            }
        }
        (covered, uncovered)
    }

    /// Commits pending hippocampal writes; no-op for ablated variants.
    pub fn flush_pending(&mut self) -> Result<usize> {
        let cfg = self.cfg.clone();
        match &mut self.hippo {
            Some(h) => h.flush_pending(&cfg),
            None => Ok(0),
        }
    }

    pub fn update_slow_targets(&mut self) {
        let alpha = self.cfg.slow_alpha;
        if let Some(h) = &mut self.hippo {
            h.update_slow_targets(alpha);
        }
    }
}
