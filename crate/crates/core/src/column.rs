//! One column of the stack: causal attention followed by a routed
//! expert feed-forward, both pre-normalized with residual connections,
//! plus a separate deep-output projection that feeds the router between
//! columns.

use crate::config::{Fault, ModelConfig};
use crate::error::Result;
use crate::param::Param;
use crate::rng::Rng;
use crate::tensor::{topk_lastdim, Tape};

#[derive(Debug, Clone)]
pub struct ExpertWeights {
    pub w1: Param,
    pub w2: Param,
    pub w3: Param,
}

impl ExpertWeights {
    fn new(prefix: &str, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        ExpertWeights {
            w1: Param::proj(format!("{prefix}.w1"), rng, cfg.d_model, cfg.d_ff),
            w2: Param::proj(format!("{prefix}.w2"), rng, cfg.d_ff, cfg.d_model),
            w3: Param::proj(format!("{prefix}.w3"), rng, cfg.d_model, cfg.d_ff),
        }
    }

    /// Gated feed-forward on a [M, d] block.
    fn apply(&self, tape: &mut Tape, x: usize) -> Result<usize> {
        let w1 = self.w1.on_tape(tape);
        let a = tape.matmul(x, w1)?;
        let s = tape.silu(a);
        let w3 = self.w3.on_tape(tape);
        let b = tape.matmul(x, w3)?;
        let prod = tape.mul(s, b);
        let w2 = self.w2.on_tape(tape);
        tape.matmul(prod, w2)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w1, &self.w2, &self.w3]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w1, &mut self.w2, &mut self.w3]
    }
}

#[derive(Debug, Clone)]
pub struct ColumnWeights {
    pub gamma_attn: Param,
    pub w_q: Param,
    pub w_k: Param,
    pub w_v: Param,
    pub w_o: Param,
    /// Projects the incoming modulatory signal into the query path.
    /// Column 1 never receives one, so it owns no such projection.
    pub w_q_mod: Option<Param>,
    pub gamma_ff: Param,
    pub w_gate: Param,
    pub experts: Vec<ExpertWeights>,
    pub shared_expert: Option<ExpertWeights>,
    /// Deep-output projection producing the signal the router consumes.
    pub w_out: Param,
}

pub struct ColumnOut {
    /// Residual stream after both sublayers, [B, T, d].
    pub hidden: usize,
    /// Deep output for the router, [B, T, d].
    pub routed: usize,
    /// Load-balance penalty for this column (tape scalar).
    pub lb_penalty: usize,
    /// How many expert applications ran; at most top_k per token.
    pub expert_evals: usize,
}

/// Additive causal mask over [T, T]: 0 at or before the diagonal,
/// -inf after it. The leaky fixture widens the window by one column.
pub fn causal_mask(t: usize, fault: Option<Fault>) -> Vec<f64> {
    let leak = matches!(fault, Some(Fault::LeakyAttentionMask));
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        let horizon = if leak { i + 1 } else { i };
        for j in 0..t {
            if j > horizon {
                m[i * t + j] = f64::NEG_INFINITY;
            }
        }
    }
    m
}

/// Inverted dropout mask, or None when inactive.
pub(crate) fn dropout_mask(p: f64, n: usize, train: bool, rng: &mut Rng) -> Option<Vec<f64>> {
    if !train || p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some((0..n).map(|_| if rng.f64() < p { 0.0 } else { keep }).collect())
}

impl ColumnWeights {
    pub fn new(cfg: &ModelConfig, layer: usize, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let p = format!("col{layer}");
        // a column owns a modulation projection only if some signal can
        // actually reach it: column 1 never gets one, and the ablation
        // flags decide whether thalamic or hippocampal feedback arrives
        let reachable = layer > 1
            && (!cfg.disable_thalamus
                || (!cfg.disable_hippocampus && layer > cfg.inject_layer()));
        let w_q_mod = if reachable {
            Some(Param::proj(format!("{p}.w_q_mod"), rng, d, d))
        } else {
            None
        };
        ColumnWeights {
            gamma_attn: Param::vector(format!("{p}.gamma_attn"), d, 1.0),
            w_q: Param::proj(format!("{p}.w_q"), rng, d, cfg.n_heads * dh),
            w_k: Param::proj(format!("{p}.w_k"), rng, d, cfg.n_kv_heads * dh),
            w_v: Param::proj(format!("{p}.w_v"), rng, d, cfg.n_kv_heads * dh),
            w_o: Param::proj(format!("{p}.w_o"), rng, cfg.n_heads * dh, d),
            w_q_mod,
            gamma_ff: Param::vector(format!("{p}.gamma_ff"), d, 1.0),
            w_gate: Param::proj(format!("{p}.w_gate"), rng, d, cfg.n_experts),
            experts: (0..cfg.n_experts)
                .map(|e| ExpertWeights::new(&format!("{p}.expert{e}"), cfg, rng))
                .collect(),
            shared_expert: cfg
                .shared_expert
                .then(|| ExpertWeights::new(&format!("{p}.shared"), cfg, rng)),
            w_out: Param::proj(format!("{p}.w_out"), rng, d, d),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![
            &self.gamma_attn,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
        ];
        if let Some(p) = &self.w_q_mod {
            v.push(p);
        }
        v.push(&self.gamma_ff);
        v.push(&self.w_gate);
        for e in &self.experts {
            v.extend(e.params());
        }
        if let Some(s) = &self.shared_expert {
            v.extend(s.params());
        }
        v.push(&self.w_out);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = vec![
            &mut self.gamma_attn,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
        ];
        v.push(&mut self.w_o);
        if let Some(p) = &mut self.w_q_mod {
            v.push(p);
        }
        v.push(&mut self.gamma_ff);
        v.push(&mut self.w_gate);
        for e in &mut self.experts {
            v.extend(e.params_mut());
        }
        if let Some(s) = &mut self.shared_expert {
            v.extend(s.params_mut());
        }
        v.push(&mut self.w_out);
        v
    }

    /// Attention sublayer. `modulation` is the optional per-position
    /// signal injected into the queries.
    fn attention(
        &self,
        tape: &mut Tape,
        cfg: &ModelConfig,
        h: usize,
        modulation: Option<usize>,
        mask: &[f64],
        train: bool,
        rng: &mut Rng,
    ) -> Result<usize> {
        let shape = tape.shape(h).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let (heads, kv_heads, dh) = (cfg.n_heads, cfg.n_kv_heads, cfg.head_dim());

        let gamma_attn = self.gamma_attn.on_tape(tape);
        let u = tape.rms_norm(h, gamma_attn, cfg.rms_eps)?;
        let w_q = self.w_q.on_tape(tape);
        let mut q_lin = tape.matmul(u, w_q)?;
        if let Some(z) = modulation {
            let w = self
                .w_q_mod
                .as_ref()
                .expect("modulated column is missing its query projection");
            let w_id = w.on_tape(tape);
            let inj = tape.matmul(z, w_id)?;
            q_lin = tape.add(q_lin, inj);
        }
        let w_k = self.w_k.on_tape(tape);
        let k_lin = tape.matmul(u, w_k)?;
        let w_v = self.w_v.on_tape(tape);
        let v_lin = tape.matmul(u, w_v)?;

        let to_heads = |tape: &mut Tape, x: usize, n_h: usize| -> usize {
            let r = tape.reshape(x, vec![b, t, n_h, dh]);
            tape.permute(r, &[0, 2, 1, 3])
        };
        let q = to_heads(tape, q_lin, heads);
        let k = to_heads(tape, k_lin, kv_heads);
        let v = to_heads(tape, v_lin, kv_heads);

        let q = tape.rope(q, cfg.rope_theta)?;
        let k = tape.rope(k, cfg.rope_theta)?;
        let k_up = tape.repeat_kv(k, cfg.kv_rep());
        let v_up = tape.repeat_kv(v, cfg.kv_rep());

        let k_t = tape.permute(k_up, &[0, 1, 3, 2]);
        let raw = tape.matmul(q, k_t)?;
        let scaled = tape.mul_scalar(raw, 1.0 / (dh as f64).sqrt());
        let att = tape.softmax_last(scaled, Some(mask))?;
        let mixed = tape.matmul(att, v_up)?;

        let back = tape.permute(mixed, &[0, 2, 1, 3]);
        let flat = tape.reshape(back, vec![b, t, heads * dh]);
        let w_o = self.w_o.on_tape(tape);
        let mut out = tape.matmul(flat, w_o)?;
        if let Some(m) = dropout_mask(cfg.dropout, b * t * d, train, rng) {
            out = tape.mul_const_arr(out, m);
        }
        Ok(tape.add(h, out))
    }

    /// Routed expert sublayer. Returns the residual output, the dense
    /// gate distribution node, and the expert application count.
    fn feed_forward(
        &self,
        tape: &mut Tape,
        cfg: &ModelConfig,
        h: usize,
        train: bool,
        rng: &mut Rng,
    ) -> Result<(usize, usize, usize)> {
        let shape = tape.shape(h).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let n = b * t;
        let k = cfg.top_k_experts;

        let gamma_ff = self.gamma_ff.on_tape(tape);
        let v_norm = tape.rms_norm(h, gamma_ff, cfg.rms_eps)?;
        let flat = tape.reshape(v_norm, vec![n, d]);
        let w_gate = self.w_gate.on_tape(tape);
        let gate_logits = tape.matmul(flat, w_gate)?;
        let gates = tape.softmax_last(gate_logits, None)?;

        // selection happens on raw values; only the chosen gate entries
        // stay differentiable through the renormalization
        let (_, sel) = topk_lastdim(tape.data(gates), &[n, cfg.n_experts], k)?;
        let p_sel = tape.gather_last(gates, &sel, k);
        let denom = tape.sum_last(p_sel);
        let denom_col = tape.reshape(denom, vec![n, 1]);
        let denom_b = tape.broadcast_last(denom_col, k);
        let weights = tape.div(p_sel, denom_b);
        let weights_flat = tape.reshape(weights, vec![n * k, 1]);

        let mut combined: Option<usize> = None;
        let mut evals = 0usize;
        for e in 0..cfg.n_experts {
            let mut tok = Vec::new();
            let mut slot = Vec::new();
            for token in 0..n {
                for j in 0..k {
                    if sel[token * k + j] == e {
                        tok.push(token);
                        slot.push(token * k + j);
                    }
                }
            }
            if tok.is_empty() {
                continue;
            }
            evals += tok.len();
            let xe = tape.gather_rows(flat, &tok);
            let ye = self.experts[e].apply(tape, xe)?;
            let we = tape.gather_rows(weights_flat, &slot);
            let we_b = tape.broadcast_last(we, d);
            let weighted = tape.mul(ye, we_b);
            let scattered = tape.scatter_add_rows(weighted, &tok, n);
            combined = Some(match combined {
                Some(acc) => tape.add(acc, scattered),
                None => scattered,
            });
        }
        let mut moe = combined.expect("at least one expert must receive tokens");
        if let Some(sh) = &self.shared_expert {
            let ys = sh.apply(tape, flat)?;
            moe = tape.add(moe, ys);
        }

        let mut out = tape.reshape(moe, vec![b, t, d]);
        if let Some(m) = dropout_mask(cfg.dropout, b * t * d, train, rng) {
            out = tape.mul_const_arr(out, m);
        }
        let res = tape.add(h, out);
        Ok((res, gates, evals))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        cfg: &ModelConfig,
        h: usize,
        modulation: Option<usize>,
        mask: &[f64],
        train: bool,
        rng: &mut Rng,
    ) -> Result<ColumnOut> {
        let h1 = self.attention(tape, cfg, h, modulation, mask, train, rng)?;
        let (h2, gates, evals) = self.feed_forward(tape, cfg, h1, train, rng)?;
        let lb = load_balance_penalty(tape, gates, cfg.lambda_lb)?;
        let w_out = self.w_out.on_tape(tape);
        let routed = tape.matmul(h2, w_out)?;
        Ok(ColumnOut { hidden: h2, routed, lb_penalty: lb, expert_evals: evals })
    }
}

/// Balance pressure on the router: for gates [N, E], multiplies each
/// expert's hard assignment share (argmax, lower index wins ties) by its
/// mean soft probability, summed and scaled by lambda * E. Gradient
/// reaches the gates only through the soft factor.
pub fn load_balance_penalty(tape: &mut Tape, gates: usize, lambda_lb: f64) -> Result<usize> {
    let shape = tape.shape(gates).to_vec();
    assert_eq!(shape.len(), 2, "load_balance_penalty expects [N, E]");
    let (n, e) = (shape[0], shape[1]);
    let (_, arg) = topk_lastdim(tape.data(gates), &shape, 1)?;
    let mut load = vec![0.0; e];
    for &a in &arg {
        load[a] += 1.0;
    }
    for l in load.iter_mut() {
        *l /= n as f64;
    }
    let transposed = tape.permute(gates, &[1, 0]);
    let imp = tape.mean_last(transposed);
    let weighted = tape.mul_const_arr(imp, load);
    let sum = tape.sum_last(weighted);
    Ok(tape.mul_scalar(sum, lambda_lb * e as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Tensor};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig::tiny()
    }

    fn forward_once(
        cfg: &ModelConfig,
        col: &ColumnWeights,
        x: &Tensor,
        fault: Option<Fault>,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let h = tape.leaf(x);
        let mask = causal_mask(x.shape[1], fault);
        let mut rng = Rng::new(0);
        let out = col.forward(&mut tape, cfg, h, None, &mask, false, &mut rng).unwrap();
        (tape.data(out.hidden).to_vec(), tape.data(out.routed).to_vec())
    }

    #[test]
    fn column_output_is_causal() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(7);
        let col = ColumnWeights::new(&cfg, 1, &mut rng);
        let (b, t, d) = (2, 6, cfg.d_model);
        let x = Tensor::uniform(&mut rng, vec![b, t, d], 1.0);
        let (base_h, base_r) = forward_once(&cfg, &col, &x, None);

        let mut bumped = x.clone();
        let cut = 3;
        for bi in 0..b {
            for u in cut..t {
                for j in 0..d {
                    bumped.data[(bi * t + u) * d + j] += 0.37;
                }
            }
        }
        let (pert_h, pert_r) = forward_once(&cfg, &col, &bumped, None);
        for bi in 0..b {
            for u in 0..cut {
                for j in 0..d {
                    let i = (bi * t + u) * d + j;
                    assert_eq!(base_h[i], pert_h[i], "hidden leaked at t={u}");
                    assert_eq!(base_r[i], pert_r[i], "routed leaked at t={u}");
                }
            }
        }
    }

    #[test]
    fn leaky_mask_fixture_breaks_causality() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(8);
        let col = ColumnWeights::new(&cfg, 1, &mut rng);
        let (b, t, d) = (1, 6, cfg.d_model);
        let x = Tensor::uniform(&mut rng, vec![b, t, d], 1.0);
        let fault = Some(Fault::LeakyAttentionMask);
        let (base_h, _) = forward_once(&cfg, &col, &x, fault);
        let mut bumped = x.clone();
        for j in 0..d {
            bumped.data[(t - 1) * d + j] += 1.0;
        }
        let (pert_h, _) = forward_once(&cfg, &col, &bumped, fault);
        // position t-2 attends one step ahead under the leak
        let i0 = (t - 2) * d;
        let delta: f64 = (0..d).map(|j| (base_h[i0 + j] - pert_h[i0 + j]).abs()).sum();
        assert!(delta > 1e-9, "leak fixture failed to leak");
    }

    #[test]
    fn routed_output_matches_dense_oracle() {
        // run every expert densely, renormalize the top-k gate slice by
        // hand, and compare mixtures
        let cfg = tiny_cfg();
        let mut rng = Rng::new(9);
        let col = ColumnWeights::new(&cfg, 1, &mut rng);
        let (b, t, d) = (2, 5, cfg.d_model);
        let x = Tensor::uniform(&mut rng, vec![b, t, d], 1.0);
        let n = b * t;

        let mut tape = Tape::new();
        let h = tape.leaf(&x);
        let mut drng = Rng::new(0);
        let (res, gates, _) = col.feed_forward(&mut tape, &cfg, h, false, &mut drng).unwrap();
        let got: Vec<f64> = tape.data(res).to_vec();
        let gate_vals = tape.data(gates).to_vec();

        // oracle: dense expert outputs on normalized input
        let mut otape = Tape::new();
        let oh = otape.leaf(&x);
        let gff = col.gamma_ff.on_tape(&mut otape);
        let vn = otape.rms_norm(oh, gff, cfg.rms_eps).unwrap();
        let flat = otape.reshape(vn, vec![n, d]);
        let dense: Vec<Vec<f64>> = col
            .experts
            .iter()
            .map(|e| {
                let y = e.apply(&mut otape, flat).unwrap();
                otape.data(y).to_vec()
            })
            .collect();

        let k = cfg.top_k_experts;
        let (_, sel) = topk_lastdim(&gate_vals, &[n, cfg.n_experts], k).unwrap();
        for token in 0..n {
            let chosen = &sel[token * k..(token + 1) * k];
            let z: f64 = chosen.iter().map(|&e| gate_vals[token * cfg.n_experts + e]).sum();
            for j in 0..d {
                let mut want = 0.0;
                for &e in chosen {
                    let w = gate_vals[token * cfg.n_experts + e] / z;
                    want += w * dense[e][token * d + j];
                }
                want += x.data[token * d + j];
                let err = (got[token * d + j] - want).abs();
                assert!(err < 1e-10, "token {token} ch {j}: err {err}");
            }
        }
    }

    #[test]
    fn full_support_routing_equals_plain_softmax_mixture() {
        let mut cfg = tiny_cfg();
        cfg.top_k_experts = cfg.n_experts;
        let mut rng = Rng::new(10);
        let col = ColumnWeights::new(&cfg, 1, &mut rng);
        let (b, t, d) = (1, 4, cfg.d_model);
        let x = Tensor::uniform(&mut rng, vec![b, t, d], 1.0);
        let n = b * t;

        let mut tape = Tape::new();
        let h = tape.leaf(&x);
        let mut drng = Rng::new(0);
        let (res, gates, evals) = col.feed_forward(&mut tape, &cfg, h, false, &mut drng).unwrap();
        assert_eq!(evals, n * cfg.n_experts);
        let got = tape.data(res).to_vec();
        let gate_vals = tape.data(gates).to_vec();

        let mut otape = Tape::new();
        let oh = otape.leaf(&x);
        let gff = col.gamma_ff.on_tape(&mut otape);
        let vn = otape.rms_norm(oh, gff, cfg.rms_eps).unwrap();
        let flat = otape.reshape(vn, vec![n, d]);
        let dense: Vec<Vec<f64>> = col
            .experts
            .iter()
            .map(|e| {
                let y = e.apply(&mut otape, flat).unwrap();
                otape.data(y).to_vec()
            })
            .collect();
        for token in 0..n {
            for j in 0..d {
                let mut want = x.data[token * d + j];
                for e in 0..cfg.n_experts {
                    want += gate_vals[token * cfg.n_experts + e] * dense[e][token * d + j];
                }
                assert!((got[token * d + j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn expert_evals_never_exceed_top_k_per_token() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(11);
        let col = ColumnWeights::new(&cfg, 1, &mut rng);
        let x = Tensor::uniform(&mut rng, vec![2, 7, cfg.d_model], 1.0);
        let mut tape = Tape::new();
        let h = tape.leaf(&x);
        let mut drng = Rng::new(0);
        let (_, _, evals) = col.feed_forward(&mut tape, &cfg, h, false, &mut drng).unwrap();
        assert!(evals <= 14 * cfg.top_k_experts);
    }

    #[test]
    fn uniform_gates_pay_exactly_lambda() {
        let mut tape = Tape::new();
        let e = 4;
        let n = 8;
        let gates = tape.constant(vec![n, e], vec![1.0 / e as f64; n * e]);
        let pen = load_balance_penalty(&mut tape, gates, 0.01).unwrap();
        // argmax ties resolve to expert 0: load = [1,0,0,0], importance
        // is 1/E each, so the product sums to 1/E and the scale restores
        // exactly lambda
        assert!((tape.data(pen)[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn column_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(12);
        let col = ColumnWeights::new(&cfg, 2, &mut rng);
        let (b, t, d) = (1, 4, cfg.d_model);
        let x = Tensor::uniform(&mut rng, vec![b, t, d], 0.5).with_grad();
        let z = Tensor::uniform(&mut rng, vec![b, t, d], 0.5).with_grad();
        let mask = causal_mask(t, None);

        let err = finite_diff_check(
            |tape, ids| {
                // route the leaves through presets so the column sees them
                let out = {
                    let mut drng = Rng::new(0);
                    col.forward(tape, &cfg, ids[0], Some(ids[1]), &mask, false, &mut drng)?
                };
                let hm = tape.mean_all(out.hidden);
                let rm = tape.mean_all(out.routed);
                let a = tape.reshape(hm, vec![1, 1]);
                let bb = tape.reshape(rm, vec![1, 1]);
                let lbr = tape.reshape(out.lb_penalty, vec![1, 1]);
                let s = tape.add(a, bb);
                let s2 = tape.add(s, lbr);
                Ok(tape.mean_all(s2))
            },
            &[x, z],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "column grad error {err}");
    }

    #[test]
    fn column_weight_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut rng = Rng::new(13);
        let col = ColumnWeights::new(&cfg, 1, &mut rng);
        let x = Tensor::uniform(&mut rng, vec![1, 3, cfg.d_model], 0.5);
        let mask = causal_mask(3, None);

        // check a representative weight from each sublayer
        let picks: Vec<Tensor> = vec![
            col.w_q.value.clone().with_grad(),
            col.w_gate.value.clone().with_grad(),
            col.experts[0].w2.value.clone().with_grad(),
            col.gamma_attn.value.clone().with_grad(),
        ];
        let err = finite_diff_check(
            |tape, ids| {
                col.w_q.preset(tape.generation(), ids[0]);
                col.w_gate.preset(tape.generation(), ids[1]);
                col.experts[0].w2.preset(tape.generation(), ids[2]);
                col.gamma_attn.preset(tape.generation(), ids[3]);
                let h = tape.leaf(&x);
                let mut drng = Rng::new(0);
                let out = col.forward(tape, &cfg, h, None, &mask, false, &mut drng)?;
                let hm = tape.mean_all(out.hidden);
                let lm = tape.reshape(hm, vec![1, 1]);
                let lb = tape.reshape(out.lb_penalty, vec![1, 1]);
                let s = tape.add(lm, lb);
                Ok(tape.mean_all(s))
            },
            &picks,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "column weight grad error {err}");
    }
}
