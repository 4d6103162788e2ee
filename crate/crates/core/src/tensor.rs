//! Flat f64 tensors and a replay-able operation tape.
//!
//! Every forward pass builds a fresh [`Tape`]. Operations append nodes
//! that own their output buffer plus whatever context the backward rule
//! needs (softmax probabilities, normalizer statistics, rotation tables).
//! [`Tape::backward`] then walks the nodes in reverse and accumulates
//! gradients into each node's `grad` slot.
//!
//! Determinism: all reductions run in a fixed ascending order, so the
//! same inputs produce bit-identical outputs and gradients on every run.
//! Buffers are assumed finite; NaN inputs are a caller bug.

use crate::error::{Error, Result};
use crate::rng::Rng;
use std::sync::atomic::{AtomicU64, Ordering};

/// Dense row-major tensor. `shape == []` denotes a scalar with one
/// element. `tape_id` is set on tensors that live inside a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub tape_id: Option<usize>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match buffer of {} elements",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            tape_id: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::new(vec![], vec![x])
    }

    /// Uniform init in [-bound, bound].
    pub fn uniform(rng: &mut Rng, shape: Vec<usize>, bound: f64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        Tensor::new(shape, data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, c: f64 },
    AddConstArr { a: usize },
    MulConstArr { a: usize, k: Vec<f64> },
    Silu { a: usize },
    Sigmoid { a: usize },
    Sqrt { a: usize },
    Clip { a: usize, lo: f64, hi: f64 },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    BroadcastLast { a: usize, n: usize },
    SumLast { a: usize, n: usize },
    MeanLast { a: usize, n: usize },
    MeanAll { a: usize },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    SoftmaxLast { a: usize, n: usize },
    RmsNorm { x: usize, gamma: usize, inv_rms: Vec<f64> },
    Rope { a: usize, cos: Vec<f64>, sin: Vec<f64>, t_len: usize, dh: usize },
    RepeatKv { a: usize, rep: usize },
    GatherRows { a: usize, idx: Vec<usize>, cols: usize },
    ScatterAddRows { src: usize, idx: Vec<usize>, cols: usize },
    GatherLast { a: usize, idx: Vec<usize>, n: usize, k: usize },
    ConcatLast { a: usize, b: usize, na: usize, nb: usize },
    CrossEntropy { logits: usize, probs: Vec<f64>, labels: Vec<i64>, ignore: i64, denom: usize },
    CausalPastMean { a: usize },
    MemScores { q: usize, keys: Vec<f64>, kk: usize, dk: usize, scale: f64 },
    MemMix { w: usize, values: Vec<f64>, kk: usize, d: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    t: Tensor,
}

static TAPE_GEN: AtomicU64 = AtomicU64::new(1);

/// Append-only record of one differentiable computation.
#[derive(Debug)]
pub struct Tape {
    gen: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// ── kernels ──

fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            if ap == 0.0 {
                // Adding 0.0 * finite leaves every partial sum bit-identical,
                // and masked attention rows make this branch pay for itself.
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += ap * brow[j];
            }
        }
    }
}

/// c[m,k] += g[m,n] * b[k,n]^T
fn mm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            crow[p] += acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * g[m,n]
fn mm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            if ap == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += ap * grow[j];
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index cycle for broadcasting `b` onto `a`: identical shapes map
/// one-to-one, a single-element `b` maps everywhere, and a `b` whose
/// shape is a suffix of `a`'s cycles through the trailing block.
fn bcast_cycle(a_shape: &[usize], b_shape: &[usize], op: &'static str) -> usize {
    let bn: usize = b_shape.iter().product();
    if bn == 1 {
        return 1;
    }
    let an: usize = a_shape.iter().product();
    let suffix_ok = b_shape.len() <= a_shape.len()
        && a_shape[a_shape.len() - b_shape.len()..] == *b_shape;
    assert!(
        suffix_ok && an % bn == 0,
        "{op}: shape {b_shape:?} does not broadcast onto {a_shape:?}"
    );
    bn
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            gen: TAPE_GEN.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Monotone id distinguishing this tape from every other one in the
    /// process; parameter caches key on it.
    pub fn generation(&self) -> u64 {
        self.gen
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, mut t: Tensor, requires_grad: bool) -> usize {
        let id = self.nodes.len();
        t.requires_grad = requires_grad;
        t.tape_id = Some(id);
        t.grad = None;
        self.nodes.push(Node { op, t });
        id
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].t.requires_grad
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.nodes[id].t
    }

    pub fn data(&self, id: usize) -> &[f64] {
        &self.nodes[id].t.data
    }

    pub fn shape(&self, id: usize) -> &[usize] {
        &self.nodes[id].t.shape
    }

    pub fn grad(&self, id: usize) -> Option<&[f64]> {
        self.nodes[id].t.grad.as_deref()
    }

    /// Copies an external tensor onto the tape as a gradient leaf.
    pub fn leaf(&mut self, t: &Tensor) -> usize {
        let rg = t.requires_grad;
        self.push(Op::Leaf, Tensor::new(t.shape.clone(), t.data.clone()), rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> usize {
        self.push(Op::Leaf, Tensor::new(shape, data), false)
    }

    pub fn scalar_const(&mut self, x: f64) -> usize {
        self.constant(vec![], vec![x])
    }

    pub fn zeros_const(&mut self, shape: Vec<usize>) -> usize {
        let n = shape.iter().product();
        self.constant(shape, vec![0.0; n])
    }

    /// Value copy with the gradient link severed.
    pub fn detach(&mut self, a: usize) -> usize {
        let t = &self.nodes[a].t;
        let (shape, data) = (t.shape.clone(), t.data.clone());
        self.constant(shape, data)
    }

    // ── elementwise ──

    pub fn add(&mut self, a: usize, b: usize) -> usize {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let cycle = bcast_cycle(&sa, &sb, "add");
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = da.iter().enumerate().map(|(i, &x)| x + db[i % cycle]).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add { a, b }, Tensor::new(sa, out), rg)
    }

    pub fn sub(&mut self, a: usize, b: usize) -> usize {
        let sa = self.shape(a).to_vec();
        assert_eq!(sa, self.shape(b), "sub: shapes must match");
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = da.iter().zip(db).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub { a, b }, Tensor::new(sa, out), rg)
    }

    pub fn mul(&mut self, a: usize, b: usize) -> usize {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let cycle = bcast_cycle(&sa, &sb, "mul");
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = da.iter().enumerate().map(|(i, &x)| x * db[i % cycle]).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Mul { a, b }, Tensor::new(sa, out), rg)
    }

    pub fn div(&mut self, a: usize, b: usize) -> usize {
        let sa = self.shape(a).to_vec();
        assert_eq!(sa, self.shape(b), "div: shapes must match");
        let (da, db) = (self.data(a), self.data(b));
        let out: Vec<f64> = da.iter().zip(db).map(|(x, y)| x / y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Div { a, b }, Tensor::new(sa, out), rg)
    }

    pub fn add_scalar(&mut self, a: usize, c: f64) -> usize {
        let sa = self.shape(a).to_vec();
        let out: Vec<f64> = self.data(a).iter().map(|&x| x + c).collect();
        let rg = self.rg(a);
        self.push(Op::AddScalar { a }, Tensor::new(sa, out), rg)
    }

    pub fn mul_scalar(&mut self, a: usize, c: f64) -> usize {
        let sa = self.shape(a).to_vec();
        let out: Vec<f64> = self.data(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(Op::MulScalar { a, c }, Tensor::new(sa, out), rg)
    }

    /// Adds a constant buffer (suffix-broadcast) without taping it.
    pub fn add_const_arr(&mut self, a: usize, k: Vec<f64>) -> usize {
        let sa = self.shape(a).to_vec();
        assert!(
            !k.is_empty() && self.data(a).len() % k.len() == 0,
            "add_const_arr: {} does not divide {}",
            k.len(),
            self.data(a).len()
        );
        let cycle = k.len();
        let out: Vec<f64> = self.data(a).iter().enumerate().map(|(i, &x)| x + k[i % cycle]).collect();
        let rg = self.rg(a);
        self.push(Op::AddConstArr { a }, Tensor::new(sa, out), rg)
    }

    /// Multiplies by a constant buffer (suffix-broadcast): dropout masks,
    /// channel masks, fixed mixing weights.
    pub fn mul_const_arr(&mut self, a: usize, k: Vec<f64>) -> usize {
        let sa = self.shape(a).to_vec();
        assert!(
            !k.is_empty() && self.data(a).len() % k.len() == 0,
            "mul_const_arr: {} does not divide {}",
            k.len(),
            self.data(a).len()
        );
        let cycle = k.len();
        let out: Vec<f64> = self.data(a).iter().enumerate().map(|(i, &x)| x * k[i % cycle]).collect();
        let rg = self.rg(a);
        self.push(Op::MulConstArr { a, k }, Tensor::new(sa, out), rg)
    }

    pub fn silu(&mut self, a: usize) -> usize {
        let sa = self.shape(a).to_vec();
        let out: Vec<f64> = self.data(a).iter().map(|&x| x * sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push(Op::Silu { a }, Tensor::new(sa, out), rg)
    }

    pub fn sigmoid(&mut self, a: usize) -> usize {
        let sa = self.shape(a).to_vec();
        let out: Vec<f64> = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push(Op::Sigmoid { a }, Tensor::new(sa, out), rg)
    }

    pub fn sqrt(&mut self, a: usize) -> usize {
        let sa = self.shape(a).to_vec();
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.sqrt()).collect();
        let rg = self.rg(a);
        self.push(Op::Sqrt { a }, Tensor::new(sa, out), rg)
    }

    /// Clamp to [lo, hi]; gradient passes where the input is inside the
    /// closed interval and is zero outside it.
    pub fn clip(&mut self, a: usize, lo: f64, hi: f64) -> usize {
        assert!(lo <= hi, "clip: lo > hi");
        let sa = self.shape(a).to_vec();
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.clamp(lo, hi)).collect();
        let rg = self.rg(a);
        self.push(Op::Clip { a, lo, hi }, Tensor::new(sa, out), rg)
    }

    // ── shape ──

    pub fn reshape(&mut self, a: usize, shape: Vec<usize>) -> usize {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data(a).len(), "reshape: element count mismatch");
        let out = self.data(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Reshape { a }, Tensor::new(shape, out), rg)
    }

    pub fn permute(&mut self, a: usize, perm: &[usize]) -> usize {
        let sa = self.shape(a).to_vec();
        assert_eq!(perm.len(), sa.len(), "permute: rank mismatch");
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let out = permute_copy(self.data(a), &sa, perm);
        let rg = self.rg(a);
        self.push(Op::Permute { a, perm: perm.to_vec() }, Tensor::new(out_shape, out), rg)
    }

    /// [.., 1] -> [.., n] by repetition.
    pub fn broadcast_last(&mut self, a: usize, n: usize) -> usize {
        let sa = self.shape(a).to_vec();
        assert_eq!(sa.last(), Some(&1), "broadcast_last: last dim must be 1");
        let rows = self.data(a).len();
        let mut out = Vec::with_capacity(rows * n);
        for &v in self.data(a) {
            out.extend(std::iter::repeat(v).take(n));
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a);
        self.push(Op::BroadcastLast { a, n }, Tensor::new(shape, out), rg)
    }

    pub fn sum_last(&mut self, a: usize) -> usize {
        let sa = self.shape(a).to_vec();
        let n = *sa.last().expect("sum_last: rank 0 input");
        let rows = self.data(a).len() / n;
        let da = self.data(a);
        let out: Vec<f64> = (0..rows)
            .map(|r| da[r * n..(r + 1) * n].iter().sum())
            .collect();
        let shape = sa[..sa.len() - 1].to_vec();
        let rg = self.rg(a);
        self.push(Op::SumLast { a, n }, Tensor::new(shape, out), rg)
    }

    pub fn mean_last(&mut self, a: usize) -> usize {
        let sa = self.shape(a).to_vec();
        let n = *sa.last().expect("mean_last: rank 0 input");
        let rows = self.data(a).len() / n;
        let da = self.data(a);
        let out: Vec<f64> = (0..rows)
            .map(|r| da[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let shape = sa[..sa.len() - 1].to_vec();
        let rg = self.rg(a);
        self.push(Op::MeanLast { a, n }, Tensor::new(shape, out), rg)
    }

    pub fn mean_all(&mut self, a: usize) -> usize {
        let n = self.data(a).len();
        assert!(n > 0, "mean_all: empty tensor");
        let s: f64 = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Op::MeanAll { a }, Tensor::scalar(s / n as f64), rg)
    }

    // ── linear algebra ──

    /// Batched matrix product. `a` is [.., m, k] and `b` is [.., k, n];
    /// the leading batch dims must match exactly, or either operand may
    /// be rank-2 and is then shared across the other's batches.
    pub fn matmul(&mut self, a: usize, b: usize) -> Result<usize> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Dimension { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let compatible = ka == kb
            && (batch_a == batch_b || batch_a.is_empty() || batch_b.is_empty());
        if !compatible {
            return Err(Error::Dimension { op: "matmul", lhs: sa, rhs: sb });
        }
        let batch: Vec<usize> = if batch_a.is_empty() { batch_b.to_vec() } else { batch_a.to_vec() };
        let nb: usize = batch.iter().product();
        let k = ka;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; nb * m * n];
        for bi in 0..nb {
            let ab = if batch_a.is_empty() { da } else { &da[bi * m * k..(bi + 1) * m * k] };
            let bb = if batch_b.is_empty() { db } else { &db[bi * k * n..(bi + 1) * k * n] };
            mm_nn(ab, bb, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
        let mut shape = batch;
        shape.push(m);
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul { a, b, m, k, n }, Tensor::new(shape, out), rg))
    }

    // ── nonlinearities with structure ──

    /// Softmax over the last dim with an optional additive mask
    /// (suffix-broadcast). Entries masked with -inf come out exactly 0;
    /// a fully masked row is an error.
    pub fn softmax_last(&mut self, a: usize, mask: Option<&[f64]>) -> Result<usize> {
        let sa = self.shape(a).to_vec();
        let n = *sa.last().ok_or_else(|| Error::Contract("softmax on rank-0 tensor".into()))?;
        let da = self.data(a);
        let rows = da.len() / n;
        if let Some(m) = mask {
            if m.len() == 0 || da.len() % m.len() != 0 || m.len() % n != 0 {
                return Err(Error::Dimension {
                    op: "softmax mask",
                    lhs: sa,
                    rhs: vec![m.len()],
                });
            }
        }
        let mut out = vec![0.0; da.len()];
        for r in 0..rows {
            let row = &da[r * n..(r + 1) * n];
            let mrow = |j: usize| -> f64 {
                match mask {
                    Some(m) => m[(r * n + j) % m.len()],
                    None => 0.0,
                }
            };
            let mut hi = f64::NEG_INFINITY;
            for j in 0..n {
                if mrow(j) != f64::NEG_INFINITY {
                    let v = row[j] + mrow(j);
                    if v > hi {
                        hi = v;
                    }
                }
            }
            if hi == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("softmax row {r} is fully masked")));
            }
            let mut z = 0.0;
            for j in 0..n {
                if mrow(j) != f64::NEG_INFINITY {
                    let e = (row[j] + mrow(j) - hi).exp();
                    out[r * n + j] = e;
                    z += e;
                }
            }
            for j in 0..n {
                out[r * n + j] /= z;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SoftmaxLast { a, n }, Tensor::new(sa, out), rg))
    }

    /// Root-mean-square normalization over the last dim with a learned
    /// per-channel scale.
    pub fn rms_norm(&mut self, x: usize, gamma: usize, eps: f64) -> Result<usize> {
        let sx = self.shape(x).to_vec();
        let sg = self.shape(gamma).to_vec();
        let d = *sx.last().ok_or_else(|| Error::Contract("rms_norm on rank-0 tensor".into()))?;
        if sg != vec![d] {
            return Err(Error::Dimension { op: "rms_norm", lhs: sx, rhs: sg });
        }
        let dx = self.data(x);
        let dg = self.data(gamma);
        let rows = dx.len() / d;
        let mut out = vec![0.0; dx.len()];
        let mut inv_rms = vec![0.0; rows];
        for r in 0..rows {
            let row = &dx[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms[r] = inv;
            for j in 0..d {
                out[r * d + j] = dg[j] * row[j] * inv;
            }
        }
        let rg = self.rg(x) || self.rg(gamma);
        Ok(self.push(Op::RmsNorm { x, gamma, inv_rms }, Tensor::new(sx, out), rg))
    }

    /// Rotary position encoding on [B, h, T, dh]: pair (2i, 2i+1) at
    /// position t rotates by t * theta^(-2i/dh). Position 0 is identity.
    pub fn rope(&mut self, a: usize, theta: f64) -> Result<usize> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 4 {
            return Err(Error::Contract(format!("rope expects rank 4, got {sa:?}")));
        }
        let (t_len, dh) = (sa[2], sa[3]);
        if dh % 2 != 0 {
            return Err(Error::Config(format!("rope head width {dh} must be even")));
        }
        let half = dh / 2;
        let mut cos = vec![0.0; t_len * half];
        let mut sin = vec![0.0; t_len * half];
        for t in 0..t_len {
            for i in 0..half {
                let freq = theta.powf(-2.0 * i as f64 / dh as f64);
                let ang = t as f64 * freq;
                cos[t * half + i] = ang.cos();
                sin[t * half + i] = ang.sin();
            }
        }
        let da = self.data(a);
        let mut out = vec![0.0; da.len()];
        let heads = sa[0] * sa[1];
        for hb in 0..heads {
            for t in 0..t_len {
                let base = (hb * t_len + t) * dh;
                for i in 0..half {
                    let (c, s) = (cos[t * half + i], sin[t * half + i]);
                    let (x0, x1) = (da[base + 2 * i], da[base + 2 * i + 1]);
                    out[base + 2 * i] = x0 * c - x1 * s;
                    out[base + 2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::Rope { a, cos, sin, t_len, dh }, Tensor::new(sa, out), rg))
    }

    /// [B, h_kv, T, dh] -> [B, h_kv*rep, T, dh]; output head i copies
    /// input head i / rep, so duplicates sit next to each other.
    pub fn repeat_kv(&mut self, a: usize, rep: usize) -> usize {
        let sa = self.shape(a).to_vec();
        assert_eq!(sa.len(), 4, "repeat_kv expects rank 4");
        assert!(rep >= 1, "repeat_kv: rep must be >= 1");
        let (b, hkv, t, dh) = (sa[0], sa[1], sa[2], sa[3]);
        let da = self.data(a);
        let head = t * dh;
        let mut out = Vec::with_capacity(da.len() * rep);
        for bi in 0..b {
            for h in 0..hkv * rep {
                let src = (bi * hkv + h / rep) * head;
                out.extend_from_slice(&da[src..src + head]);
            }
        }
        let rg = self.rg(a);
        self.push(
            Op::RepeatKv { a, rep },
            Tensor::new(vec![b, hkv * rep, t, dh], out),
            rg,
        )
    }

    // ── gather / scatter ──

    /// Row lookup into a [R, C] matrix; used for embeddings and for
    /// routing token subsets to experts.
    pub fn gather_rows(&mut self, a: usize, idx: &[usize]) -> usize {
        let sa = self.shape(a).to_vec();
        assert_eq!(sa.len(), 2, "gather_rows expects rank 2");
        let (r, c) = (sa[0], sa[1]);
        let da = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather_rows: row {i} out of range {r}");
            out.extend_from_slice(&da[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        self.push(
            Op::GatherRows { a, idx: idx.to_vec(), cols: c },
            Tensor::new(vec![idx.len(), c], out),
            rg,
        )
    }

    /// Scatter-add rows of src [M, C] into a fresh [rows, C] buffer.
    /// Duplicate targets accumulate in src order.
    pub fn scatter_add_rows(&mut self, src: usize, idx: &[usize], rows: usize) -> usize {
        let ss = self.shape(src).to_vec();
        assert_eq!(ss.len(), 2, "scatter_add_rows expects rank 2");
        assert_eq!(ss[0], idx.len(), "scatter_add_rows: index count mismatch");
        let c = ss[1];
        let ds = self.data(src);
        let mut out = vec![0.0; rows * c];
        for (j, &i) in idx.iter().enumerate() {
            assert!(i < rows, "scatter_add_rows: row {i} out of range {rows}");
            for x in 0..c {
                out[i * c + x] += ds[j * c + x];
            }
        }
        let rg = self.rg(src);
        self.push(
            Op::ScatterAddRows { src, idx: idx.to_vec(), cols: c },
            Tensor::new(vec![rows, c], out),
            rg,
        )
    }

    /// Per-row element pick: a is [.., n], idx is row-major [.., k] with
    /// entries < n; output is [.., k].
    pub fn gather_last(&mut self, a: usize, idx: &[usize], k: usize) -> usize {
        let sa = self.shape(a).to_vec();
        let n = *sa.last().expect("gather_last: rank 0 input");
        let rows = self.data(a).len() / n;
        assert_eq!(idx.len(), rows * k, "gather_last: index count mismatch");
        let da = self.data(a);
        let mut out = vec![0.0; rows * k];
        for r in 0..rows {
            for j in 0..k {
                let i = idx[r * k + j];
                assert!(i < n, "gather_last: index {i} out of range {n}");
                out[r * k + j] = da[r * n + i];
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(k);
        let rg = self.rg(a);
        self.push(Op::GatherLast { a, idx: idx.to_vec(), n, k }, Tensor::new(shape, out), rg)
    }

    pub fn concat_last(&mut self, a: usize, b: usize) -> usize {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[..sa.len() - 1], sb[..sb.len() - 1], "concat_last: leading dims differ");
        let (na, nb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = self.data(a).len() / na;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * (na + nb));
        for r in 0..rows {
            out.extend_from_slice(&da[r * na..(r + 1) * na]);
            out.extend_from_slice(&db[r * nb..(r + 1) * nb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = na + nb;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::ConcatLast { a, b, na, nb }, Tensor::new(shape, out), rg)
    }

    // ── losses ──

    /// Mean negative log-likelihood over rows whose label differs from
    /// `ignore`. Labels must lie in [0, V) or equal `ignore`.
    pub fn cross_entropy(&mut self, logits: usize, labels: &[i64], ignore: i64) -> Result<usize> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 {
            return Err(Error::Contract(format!("cross_entropy expects [N, V], got {sl:?}")));
        }
        let (rows, v) = (sl[0], sl[1]);
        if labels.len() != rows {
            return Err(Error::Dimension { op: "cross_entropy", lhs: sl, rhs: vec![labels.len()] });
        }
        for (r, &y) in labels.iter().enumerate() {
            if y != ignore && (y < 0 || y >= v as i64) {
                return Err(Error::Input(format!(
                    "label {y} at row {r} outside vocabulary of {v}"
                )));
            }
        }
        let denom = labels.iter().filter(|&&y| y != ignore).count();
        if denom == 0 {
            return Err(Error::Contract("cross_entropy: every label is ignored".into()));
        }
        let dl = self.data(logits);
        let mut probs = vec![0.0; dl.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &dl[r * v..(r + 1) * v];
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..v {
                let e = (row[j] - hi).exp();
                probs[r * v + j] = e;
                z += e;
            }
            for j in 0..v {
                probs[r * v + j] /= z;
            }
            let y = labels[r];
            if y != ignore {
                loss += -(probs[r * v + y as usize].ln());
            }
        }
        loss /= denom as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                ignore,
                denom,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    // ── sequence statistics ──

    /// Strictly causal running mean over dim 1 of [B, T, r]: output at
    /// position t is the mean of positions 0..t and position 0 is zero.
    /// The prefix sums use Kahan compensation so long sequences do not
    /// drift.
    pub fn causal_past_mean(&mut self, a: usize) -> usize {
        let sa = self.shape(a).to_vec();
        assert_eq!(sa.len(), 3, "causal_past_mean expects [B, T, r]");
        let (b, t_len, r) = (sa[0], sa[1], sa[2]);
        let da = self.data(a);
        let mut out = vec![0.0; da.len()];
        for bi in 0..b {
            let mut sum = vec![0.0; r];
            let mut comp = vec![0.0; r];
            for t in 0..t_len {
                if t > 0 {
                    let inv = 1.0 / t as f64;
                    for j in 0..r {
                        out[(bi * t_len + t) * r + j] = sum[j] * inv;
                    }
                }
                for j in 0..r {
                    let y = da[(bi * t_len + t) * r + j] - comp[j];
                    let s = sum[j] + y;
                    comp[j] = (s - sum[j]) - y;
                    sum[j] = s;
                }
            }
        }
        let rg = self.rg(a);
        self.push(Op::CausalPastMean { a }, Tensor::new(sa, out), rg)
    }

    // ── episodic-memory projections ──

    /// Scaled dot products between live queries [B, T, dk] and a fixed
    /// per-position key block [B, T, kk, dk]. Keys are stored state, not
    /// tape values, so gradient flows into the queries only.
    pub fn mem_scores(&mut self, q: usize, keys: Vec<f64>, kk: usize, scale: f64) -> usize {
        let sq = self.shape(q).to_vec();
        assert_eq!(sq.len(), 3, "mem_scores expects [B, T, dk]");
        let dk = sq[2];
        let rows = sq[0] * sq[1];
        assert_eq!(keys.len(), rows * kk * dk, "mem_scores: key block size mismatch");
        let dq = self.data(q);
        let mut out = vec![0.0; rows * kk];
        for r in 0..rows {
            let qrow = &dq[r * dk..(r + 1) * dk];
            for i in 0..kk {
                let krow = &keys[(r * kk + i) * dk..(r * kk + i + 1) * dk];
                let mut acc = 0.0;
                for j in 0..dk {
                    acc += qrow[j] * krow[j];
                }
                out[r * kk + i] = acc * scale;
            }
        }
        let shape = vec![sq[0], sq[1], kk];
        let rg = self.rg(q);
        self.push(Op::MemScores { q, keys, kk, dk, scale }, Tensor::new(shape, out), rg)
    }

    /// Convex mix of fixed per-position value blocks [B, T, kk, d] by
    /// live weights [B, T, kk]. Gradient flows into the weights only.
    pub fn mem_mix(&mut self, w: usize, values: Vec<f64>, d: usize) -> usize {
        let sw = self.shape(w).to_vec();
        assert_eq!(sw.len(), 3, "mem_mix expects [B, T, kk]");
        let kk = sw[2];
        let rows = sw[0] * sw[1];
        assert_eq!(values.len(), rows * kk * d, "mem_mix: value block size mismatch");
        let dw = self.data(w);
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            for i in 0..kk {
                let wv = dw[r * kk + i];
                if wv == 0.0 {
                    continue;
                }
                let vrow = &values[(r * kk + i) * d..(r * kk + i + 1) * d];
                for j in 0..d {
                    out[r * d + j] += wv * vrow[j];
                }
            }
        }
        let shape = vec![sw[0], sw[1], d];
        let rg = self.rg(w);
        self.push(Op::MemMix { w, values, kk, d }, Tensor::new(shape, out), rg)
    }

    // ── backward ──

    /// Reverse pass from a scalar loss. Populates `grad` on every node
    /// that participates; leaves expose theirs through [`Tape::grad`].
    pub fn backward(&mut self, loss: usize) -> Result<()> {
        if self.nodes[loss].t.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar, got shape {:?}",
                self.nodes[loss].t.shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss] = Some(vec![1.0]);

        for id in (0..n).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            self.nodes[id].t.grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&self, id: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let needs = |s: &Self, i: usize| s.nodes[i].t.requires_grad;
        macro_rules! acc {
            ($i:expr, $f:expr) => {{
                let i = $i;
                if needs(self, i) {
                    let buf = grads[i].get_or_insert_with(|| vec![0.0; self.nodes[i].t.numel()]);
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(buf.as_mut_slice());
                }
            }};
        }

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc!(*a, |ga: &mut [f64]| for (x, y) in ga.iter_mut().zip(g) { *x += y; });
                acc!(*b, |gb: &mut [f64]| {
                    let c = gb.len();
                    for (i, y) in g.iter().enumerate() {
                        gb[i % c] += y;
                    }
                });
            }
            Op::Sub { a, b } => {
                acc!(*a, |ga: &mut [f64]| for (x, y) in ga.iter_mut().zip(g) { *x += y; });
                acc!(*b, |gb: &mut [f64]| for (x, y) in gb.iter_mut().zip(g) { *x -= y; });
            }
            Op::Mul { a, b } => {
                let (da, db) = (&self.nodes[*a].t.data, &self.nodes[*b].t.data);
                let c = db.len();
                acc!(*a, |ga: &mut [f64]| for i in 0..g.len() { ga[i] += g[i] * db[i % c]; });
                acc!(*b, |gb: &mut [f64]| for i in 0..g.len() { gb[i % c] += g[i] * da[i]; });
            }
            Op::Div { a, b } => {
                let (da, db) = (&self.nodes[*a].t.data, &self.nodes[*b].t.data);
                acc!(*a, |ga: &mut [f64]| for i in 0..g.len() { ga[i] += g[i] / db[i]; });
                acc!(*b, |gb: &mut [f64]| for i in 0..g.len() {
                    gb[i] -= g[i] * da[i] / (db[i] * db[i]);
                });
            }
            Op::AddScalar { a } | Op::AddConstArr { a } | Op::Reshape { a } => {
                acc!(*a, |ga: &mut [f64]| for (x, y) in ga.iter_mut().zip(g) { *x += y; });
            }
            Op::MulScalar { a, c } => {
                acc!(*a, |ga: &mut [f64]| for i in 0..g.len() { ga[i] += g[i] * c; });
            }
            Op::MulConstArr { a, k } => {
                let c = k.len();
                acc!(*a, |ga: &mut [f64]| for i in 0..g.len() { ga[i] += g[i] * k[i % c]; });
            }
            Op::Silu { a } => {
                let da = &self.nodes[*a].t.data;
                acc!(*a, |ga: &mut [f64]| for i in 0..g.len() {
                    let s = sigmoid(da[i]);
                    ga[i] += g[i] * s * (1.0 + da[i] * (1.0 - s));
                });
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[id].t.data;
                acc!(*a, |ga: &mut [f64]| for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                });
            }
            Op::Sqrt { a } => {
                let y = &self.nodes[id].t.data;
                acc!(*a, |ga: &mut [f64]| for i in 0..g.len() {
                    ga[i] += g[i] * 0.5 / y[i];
                });
            }
            Op::Clip { a, lo, hi } => {
                let da = &self.nodes[*a].t.data;
                acc!(*a, |ga: &mut [f64]| for i in 0..g.len() {
                    if da[i] >= *lo && da[i] <= *hi {
                        ga[i] += g[i];
                    }
                });
            }
            Op::Permute { a, perm } => {
                let inv = invert_perm(perm);
                let out_shape = &self.nodes[id].t.shape;
                let back = permute_copy(g, out_shape, &inv);
                acc!(*a, |ga: &mut [f64]| for (x, y) in ga.iter_mut().zip(&back) { *x += y; });
            }
            Op::BroadcastLast { a, n } => {
                acc!(*a, |ga: &mut [f64]| {
                    for (r, slot) in ga.iter_mut().enumerate() {
                        for j in 0..*n {
                            *slot += g[r * n + j];
                        }
                    }
                });
            }
            Op::SumLast { a, n } => {
                acc!(*a, |ga: &mut [f64]| for i in 0..ga.len() { ga[i] += g[i / n]; });
            }
            Op::MeanLast { a, n } => {
                let inv = 1.0 / *n as f64;
                acc!(*a, |ga: &mut [f64]| for i in 0..ga.len() { ga[i] += g[i / n] * inv; });
            }
            Op::MeanAll { a } => {
                let inv = 1.0 / self.nodes[*a].t.numel() as f64;
                acc!(*a, |ga: &mut [f64]| for x in ga.iter_mut() { *x += g[0] * inv; });
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, nn) = (*m, *k, *n);
                let sa = &self.nodes[*a].t.shape;
                let sb = &self.nodes[*b].t.shape;
                let a_batched = sa.len() > 2;
                let b_batched = sb.len() > 2;
                let nb = self.nodes[id].t.numel() / (m * nn);
                let da = &self.nodes[*a].t.data;
                let db = &self.nodes[*b].t.data;
                acc!(*a, |ga: &mut [f64]| {
                    for bi in 0..nb {
                        let gb = &g[bi * m * nn..(bi + 1) * m * nn];
                        let bb = if b_batched { &db[bi * k * nn..(bi + 1) * k * nn] } else { db };
                        let slot = if a_batched {
                            &mut ga[bi * m * k..(bi + 1) * m * k]
                        } else {
                            &mut ga[..]
                        };
                        mm_nt(gb, bb, slot, m, k, nn);
                    }
                });
                acc!(*b, |gbuf: &mut [f64]| {
                    for bi in 0..nb {
                        let gg = &g[bi * m * nn..(bi + 1) * m * nn];
                        let ab = if a_batched { &da[bi * m * k..(bi + 1) * m * k] } else { da };
                        let slot = if b_batched {
                            &mut gbuf[bi * k * nn..(bi + 1) * k * nn]
                        } else {
                            &mut gbuf[..]
                        };
                        mm_tn(ab, gg, slot, m, k, nn);
                    }
                });
            }
            Op::SoftmaxLast { a, n } => {
                let y = &self.nodes[id].t.data;
                let rows = y.len() / n;
                acc!(*a, |ga: &mut [f64]| {
                    for r in 0..rows {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mut dot = 0.0;
                        for j in 0..*n {
                            dot += gr[j] * yr[j];
                        }
                        for j in 0..*n {
                            ga[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gamma, inv_rms } => {
                let dx = &self.nodes[*x].t.data;
                let dg = &self.nodes[*gamma].t.data;
                let d = dg.len();
                let rows = dx.len() / d;
                acc!(*x, |gx: &mut [f64]| {
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        let row = &dx[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut s = 0.0;
                        for j in 0..d {
                            s += gr[j] * dg[j] * row[j];
                        }
                        let coef = inv * inv * inv * s / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += dg[j] * gr[j] * inv - row[j] * coef;
                        }
                    }
                });
                acc!(*gamma, |gg: &mut [f64]| {
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        for j in 0..d {
                            gg[j] += g[r * d + j] * dx[r * d + j] * inv;
                        }
                    }
                });
            }
            Op::Rope { a, cos, sin, t_len, dh } => {
                let half = dh / 2;
                let heads = self.nodes[id].t.numel() / (t_len * dh);
                acc!(*a, |ga: &mut [f64]| {
                    for hb in 0..heads {
                        for t in 0..*t_len {
                            let base = (hb * t_len + t) * dh;
                            for i in 0..half {
                                let (c, s) = (cos[t * half + i], sin[t * half + i]);
                                let (g0, g1) = (g[base + 2 * i], g[base + 2 * i + 1]);
                                ga[base + 2 * i] += g0 * c + g1 * s;
                                ga[base + 2 * i + 1] += -g0 * s + g1 * c;
                            }
                        }
                    }
                });
            }
            Op::RepeatKv { a, rep } => {
                let s_out = &self.nodes[id].t.shape;
                let (b, h_out, t, dh) = (s_out[0], s_out[1], s_out[2], s_out[3]);
                let hkv = h_out / rep;
                let head = t * dh;
                acc!(*a, |ga: &mut [f64]| {
                    for bi in 0..b {
                        for h in 0..h_out {
                            let dst = (bi * hkv + h / rep) * head;
                            let src = (bi * h_out + h) * head;
                            for x in 0..head {
                                ga[dst + x] += g[src + x];
                            }
                        }
                    }
                });
            }
            Op::GatherRows { a, idx, cols } => {
                acc!(*a, |ga: &mut [f64]| {
                    for (j, &i) in idx.iter().enumerate() {
                        for x in 0..*cols {
                            ga[i * cols + x] += g[j * cols + x];
                        }
                    }
                });
            }
            Op::ScatterAddRows { src, idx, cols } => {
                acc!(*src, |gs: &mut [f64]| {
                    for (j, &i) in idx.iter().enumerate() {
                        for x in 0..*cols {
                            gs[j * cols + x] += g[i * cols + x];
                        }
                    }
                });
            }
            Op::GatherLast { a, idx, n, k } => {
                let rows = idx.len() / k;
                acc!(*a, |ga: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..*k {
                            ga[r * n + idx[r * k + j]] += g[r * k + j];
                        }
                    }
                });
            }
            Op::ConcatLast { a, b, na, nb } => {
                let rows = self.nodes[id].t.numel() / (na + nb);
                acc!(*a, |ga: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..*na {
                            ga[r * na + j] += g[r * (na + nb) + j];
                        }
                    }
                });
                acc!(*b, |gb: &mut [f64]| {
                    for r in 0..rows {
                        for j in 0..*nb {
                            gb[r * nb + j] += g[r * (na + nb) + na + j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, probs, labels, ignore, denom } => {
                let v = self.nodes[*logits].t.shape[1];
                let scale = g[0] / *denom as f64;
                acc!(*logits, |gl: &mut [f64]| {
                    for (r, &y) in labels.iter().enumerate() {
                        if y == *ignore {
                            continue;
                        }
                        for j in 0..v {
                            let hot = if j as i64 == y { 1.0 } else { 0.0 };
                            gl[r * v + j] += scale * (probs[r * v + j] - hot);
                        }
                    }
                });
            }
            Op::CausalPastMean { a } => {
                let sa = &self.nodes[*a].t.shape;
                let (b, t_len, r) = (sa[0], sa[1], sa[2]);
                acc!(*a, |ga: &mut [f64]| {
                    for bi in 0..b {
                        let mut acc_row = vec![0.0; r];
                        for t in (1..t_len).rev() {
                            let inv = 1.0 / t as f64;
                            for j in 0..r {
                                acc_row[j] += g[(bi * t_len + t) * r + j] * inv;
                                ga[(bi * t_len + t - 1) * r + j] += acc_row[j];
                            }
                        }
                    }
                });
            }
            Op::MemScores { q, keys, kk, dk, scale } => {
                let rows = self.nodes[id].t.numel() / kk;
                acc!(*q, |gq: &mut [f64]| {
                    for r in 0..rows {
                        for i in 0..*kk {
                            let gv = g[r * kk + i] * scale;
                            if gv == 0.0 {
                                continue;
                            }
                            let krow = &keys[(r * kk + i) * dk..(r * kk + i + 1) * dk];
                            for j in 0..*dk {
                                gq[r * dk + j] += gv * krow[j];
                            }
                        }
                    }
                });
            }
            Op::MemMix { w, values, kk, d } => {
                let rows = self.nodes[id].t.numel() / d;
                acc!(*w, |gw: &mut [f64]| {
                    for r in 0..rows {
                        for i in 0..*kk {
                            let vrow = &values[(r * kk + i) * d..(r * kk + i + 1) * d];
                            let mut acc = 0.0;
                            for j in 0..*d {
                                acc += g[r * d + j] * vrow[j];
                            }
                            gw[r * kk + i] += acc;
                        }
                    }
                });
            }
        }
    }
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_copy(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0;
        for (i, &ix) in idx.iter().enumerate() {
            src += ix * in_strides[perm[i]];
        }
        *slot = data[src];
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}

// ── selection and order statistics ──

/// Top-k along the last dim. Returns (values, indices), each row sorted
/// by value descending with ties broken toward the lower index. Inputs
/// must be NaN-free.
pub fn topk_lastdim(data: &[f64], shape: &[usize], k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = *shape.last().ok_or_else(|| Error::Contract("topk on rank-0 tensor".into()))?;
    if k == 0 || k > n {
        return Err(Error::Contract(format!("topk: k={k} outside 1..={n}")));
    }
    let rows = data.len() / n;
    let mut vals = Vec::with_capacity(rows * k);
    let mut idxs = Vec::with_capacity(rows * k);
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for r in 0..rows {
        let row = &data[r * n..(r + 1) * n];
        order.clear();
        order.extend(0..n);
        order.sort_by(|&i, &j| {
            row[j].partial_cmp(&row[i]).expect("topk: NaN in input").then(i.cmp(&j))
        });
        for &i in order.iter().take(k) {
            vals.push(row[i]);
            idxs.push(i);
        }
    }
    Ok((vals, idxs))
}

/// Quantile of an unsorted sample by sorted linear interpolation with
/// inclusive endpoints: p=0 gives the minimum, p=1 the maximum.
pub fn quantile(sample: &[f64], p: f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::Contract("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!("quantile: p={p} outside [0, 1]")));
    }
    let mut v = sample.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("quantile: NaN in sample"));
    let n = v.len();
    if n == 1 {
        return Ok(v[0]);
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    Ok(v[lo] + (v[hi] - v[lo]) * frac)
}

// ── gradient oracle ──

/// Central-difference check of the reverse pass. `build` must construct
/// the same scalar loss from the given leaf ids on any fresh tape, with
/// no side effects. Returns the max over leaf elements of
/// |ad - fd| / max(1, |ad|, |fd|).
pub fn finite_diff_check<F>(build: F, leaves: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[usize]) -> Result<usize>,
{
    let mut tape = Tape::new();
    let ids: Vec<usize> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let ad: Vec<Vec<f64>> = ids
        .iter()
        .zip(leaves)
        .map(|(&id, t)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |work: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<usize> = work.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.data(loss)[0])
    };

    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut worst = 0.0f64;
    for li in 0..work.len() {
        if !leaves[li].requires_grad {
            continue;
        }
        for e in 0..work[li].numel() {
            let orig = work[li].data[e];
            work[li].data[e] = orig + h;
            let fp = eval(&work)?;
            work[li].data[e] = orig - h;
            let fm = eval(&work)?;
            work[li].data[e] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = ad[li][e];
            let rel = (a - fd).abs() / 1.0f64.max(a.abs()).max(fd.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
