//! Dense double-precision tensors with a reverse-mode tape.
//!
//! Every primitive records its inputs and whatever activations its backward
//! pass needs. [`Tape::backward`] walks the record in exact reverse order and
//! accumulates gradients into the `grad` buffer of every leaf created with
//! `requires_grad`.
//!
//! Shapes are row-major; the last axis is the feature axis. Shape mismatches
//! are programming errors and panic.

use serde::{Deserialize, Serialize};

/// Additive value standing in for −∞ in attention masks.
pub const MASK_NEG: f64 = -1e30;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

#[derive(Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = String;

    fn try_from(r: TensorRepr) -> Result<Self, String> {
        let n = r.shape.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d));
        if r.shape.is_empty() || n != Some(r.data.len()) {
            return Err(format!("tensor shape {:?} does not match {} values", r.shape, r.data.len()));
        }
        Ok(Tensor::new(r.shape, r.data))
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length does not match shape {shape:?}"
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::new(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    /// Mark as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has no axes")
    }

    /// Product of all but the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Sum,
    Mean,
    Max,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        BatchNormStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    Transpose { a: Var, batch: usize, r: usize, c: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Mul { a: Var, b: Var },
    Sigmoid { a: Var },
    MaskedSoftmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, valid: Vec<bool>, batch_stats: bool },
    Dropout { a: Var, scale: Vec<f64> },
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    SumAxis { a: Var, outer: usize, len: usize, inner: usize },
    SetPool { a: Var, counts: Vec<usize>, kind: PoolKind, n: usize, d: usize, argmax: Vec<usize> },
    Huber { a: Var, delta: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// c[m×n] += a[m×k] · b[k×n]
//
// 4×4 blocks of `c` are accumulated in registers; ragged edges fall back
// to a plain loop.
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let (m4, n4) = (m / 4 * 4, n / 4 * 4);
    for i in (0..m4).step_by(4) {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for j in (0..n4).step_by(4) {
            let mut acc = [[0.0f64; 4]; 4];
            for ((((&x0, &x1), &x2), &x3), b_row) in a0.iter().zip(a1).zip(a2).zip(a3).zip(b.chunks_exact(n)) {
                let bp: &[f64; 4] = b_row[j..j + 4].try_into().unwrap();
                for c in 0..4 {
                    acc[0][c] += x0 * bp[c];
                    acc[1][c] += x1 * bp[c];
                    acc[2][c] += x2 * bp[c];
                    acc[3][c] += x3 * bp[c];
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let cr = &mut c[(i + r) * n + j..(i + r) * n + j + 4];
                for (x, v) in cr.iter_mut().zip(row) {
                    *x += v;
                }
            }
        }
        for r in i..i + 4 {
            gemm_edge(a, b, c, r, k, n, n4);
        }
    }
    for r in m4..m {
        gemm_edge(a, b, c, r, k, n, 0);
    }
}

// Row `i` of c, columns `from..n`.
fn gemm_edge(a: &[f64], b: &[f64], c: &mut [f64], i: usize, k: usize, n: usize, from: usize) {
    for j in from..n {
        let mut acc = 0.0;
        for p in 0..k {
            acc += a[i * k + p] * b[p * n + j];
        }
        c[i * n + j] += acc;
    }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_nn(a, &bt, c, m, k, n);
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let mut at = vec![0.0; k * m];
    for i in 0..m {
        for p in 0..k {
            at[p * m + i] = a[i * k + p];
        }
    }
    gemm_nn(&at, b, c, k, m, n);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic uniform in [0, 1) for element `index` of stream `seed`.
pub fn counter_uniform(seed: u64, index: u64) -> f64 {
    let h = splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Combine seed components (epoch, batch, layer, ...) into one stream id.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ p))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf; gradients flow into it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant (never receives gradient).
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Move a leaf tensor (with its accumulated gradient) out of the tape.
    pub fn take_leaf(&mut self, v: Var) -> Tensor {
        assert!(matches!(self.nodes[v.0].op, Op::Leaf), "take_leaf on a non-leaf");
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// `a[..., m, k] · b[k, n]` (shared right operand) or batched
    /// `a[..., m, k] · b[..., k, n]` with matching leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs 2-d operands");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, kb, "matmul inner dimensions differ: {sa:?} · {sb:?}");
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs {
            assert_eq!(&sa[..sa.len() - 2], &sb[..sb.len() - 2], "matmul batch axes differ");
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            if shared_rhs {
                gemm_nn(ad, bd, &mut out, batch * m, k, n);
            } else {
                for s in 0..batch {
                    gemm_nn(
                        &ad[s * m * k..(s + 1) * m * k],
                        &bd[s * k * n..(s + 1) * k * n],
                        &mut out[s * m * n..(s + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        self.push(Tensor::new(shape, out), Op::MatMul { a, b, batch, m, k, n, shared_rhs }, &[a, b])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert!(s.len() >= 2);
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let base = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = src[base + i * c + j];
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([c, r]);
        self.push(Tensor::new(shape, out), Op::Transpose { a, batch, r, c }, &[a])
    }

    /// Elementwise sum; `b` may be a trailing-axes suffix of `a` and is then
    /// broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.ends_with(sb), "add: {sb:?} does not broadcast onto {sa:?}");
        let shape = sa.to_vec();
        let bd = self.data(b);
        let out: Vec<f64> = self.data(a).chunks(bd.len()).flat_map(|ch| ch.iter().zip(bd).map(|(x, y)| x + y)).collect();
        self.push(Tensor::new(shape, out), Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out), Op::Sub { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out), Op::Scale { a, c }, &[a])
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out), Op::Mul { a, b }, &[a, b])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out), Op::Sigmoid { a }, &[a])
    }

    /// Softmax over the last axis of `logits + mask`, where `mask` holds 0
    /// for visible and −∞ (or anything ≤ [`MASK_NEG`]) for hidden positions.
    /// Hidden positions output exactly 0; a fully hidden row is all zeros.
    pub fn masked_softmax(&mut self, logits: Var, mask: &Tensor) -> Var {
        assert_eq!(self.shape(logits), mask.shape(), "mask shape must match logits");
        let keep: Vec<bool> = mask.data().iter().map(|&m| m > MASK_NEG).collect();
        let x = self.data(logits);
        let d = self.shape(logits).last().copied().unwrap_or(1);
        let mut out = vec![0.0; x.len()];
        for ((row, k), o) in x.chunks(d).zip(keep.chunks(d)).zip(out.chunks_mut(d)) {
            let max = row.iter().zip(k).filter(|(_, &k)| k).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for ((o, &v), &k) in o.iter_mut().zip(row).zip(k) {
                if k {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let shape = self.shape(logits).to_vec();
        self.push(Tensor::new(shape, out), Op::MaskedSoftmax { a: logits }, &[logits])
    }

    /// Normalize each row over the last axis, then scale and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let d = self.value(x).cols();
        assert_eq!(self.shape(gain), [d]);
        assert_eq!(self.shape(bias), [d]);
        let xs = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = Vec::with_capacity(xs.len() / d);
        let mut out = vec![0.0; xs.len()];
        for ((row, xh), o) in xs.chunks(d).zip(xhat.chunks_mut(d)).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(s);
            for j in 0..d {
                xh[j] = (row[j] - mean) * s;
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out), Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    /// Per-channel normalization over all rows (every axis but the last).
    ///
    /// In training mode the statistics come from the rows flagged in
    /// `valid` (all rows when `None`) and update `stats` with momentum
    /// [`BATCH_NORM_MOMENTUM`]; in evaluation mode `stats` is used as is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: Mode,
        valid: Option<&[bool]>,
    ) -> Var {
        let c = self.value(x).cols();
        let rows = self.value(x).rows();
        assert_eq!(self.shape(gamma), [c]);
        assert_eq!(self.shape(beta), [c]);
        assert_eq!(stats.mean.len(), c);
        let valid: Vec<bool> = match valid {
            Some(v) => {
                assert_eq!(v.len(), rows, "validity mask must cover every row");
                v.to_vec()
            }
            None => vec![true; rows],
        };
        let m = valid.iter().filter(|v| **v).count();
        let xs = self.data(x);
        let batch_stats = mode == Mode::Train && m > 0;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            for (row, _) in xs.chunks(c).zip(&valid).filter(|(_, v)| **v) {
                mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            mean.iter_mut().for_each(|a| *a /= m as f64);
            let mut var = vec![0.0; c];
            for (row, _) in xs.chunks(c).zip(&valid).filter(|(_, v)| **v) {
                for j in 0..c {
                    var[j] += (row[j] - mean[j]).powi(2);
                }
            }
            var.iter_mut().for_each(|a| *a /= m as f64);
            let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            for j in 0..c {
                stats.mean[j] = (1.0 - BATCH_NORM_MOMENTUM) * stats.mean[j] + BATCH_NORM_MOMENTUM * mean[j];
                stats.var[j] = (1.0 - BATCH_NORM_MOMENTUM) * stats.var[j] + BATCH_NORM_MOMENTUM * var[j] * unbias;
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for ((row, xh), o) in xs.chunks(c).zip(xhat.chunks_mut(c)).zip(out.chunks_mut(c)) {
            for j in 0..c {
                xh[j] = (row[j] - mean[j]) * inv_std[j];
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, valid, batch_stats },
            &[x, gamma, beta],
        )
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64, mode: Mode) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability must lie in [0, 1)");
        if mode == Mode::Eval || p == 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> =
            (0..self.value(a).len()).map(|i| if counter_uniform(seed, i as u64) < p { 0.0 } else { keep }).collect();
        let out = self.data(a).iter().zip(&scale).map(|(x, s)| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out), Op::Dropout { a, scale }, &[a])
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = self.shape(*p);
                assert_eq!(&s[..s.len() - 1], lead.as_slice(), "concat: leading axes differ");
                *s.last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(*p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::new(shape, out), Op::Concat { parts: parts.to_vec(), widths }, parts)
    }

    /// Sum over one axis (removed from the shape; a 1-d input yields `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let s = self.shape(a).to_vec();
        assert!(axis < s.len());
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape: Vec<usize> = s[..axis].iter().chain(&s[axis + 1..]).copied().collect();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Tensor::new(shape, out), Op::SumAxis { a, outer, len, inner }, &[a])
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let total = self.data(a).iter().sum();
        self.push(Tensor::new(vec![1], vec![total]), Op::SumAxis { a, outer: 1, len: n, inner: 1 }, &[a])
    }

    /// Aggregate the first `counts[b]` rows of each `[B, N, D]` set. Rows at
    /// or beyond the count never contribute; an empty set pools to zero.
    pub fn set_pool(&mut self, a: Var, counts: &[usize], kind: PoolKind) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 3, "set_pool expects [B, N, D]");
        let (bsz, n, d) = (s[0], s[1], s[2]);
        assert_eq!(counts.len(), bsz);
        let src = self.data(a);
        let mut out = vec![0.0; bsz * d];
        let mut argmax = vec![usize::MAX; bsz * d];
        for b in 0..bsz {
            let cnt = counts[b].min(n);
            if cnt == 0 {
                continue;
            }
            let o = &mut out[b * d..(b + 1) * d];
            match kind {
                PoolKind::Sum | PoolKind::Mean => {
                    for i in 0..cnt {
                        let row = &src[(b * n + i) * d..(b * n + i + 1) * d];
                        o.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                    }
                    if kind == PoolKind::Mean {
                        o.iter_mut().for_each(|v| *v /= cnt as f64);
                    }
                }
                PoolKind::Max => {
                    for j in 0..d {
                        let (mut best, mut at) = (f64::NEG_INFINITY, 0);
                        for i in 0..cnt {
                            let v = src[(b * n + i) * d + j];
                            if v > best {
                                best = v;
                                at = i;
                            }
                        }
                        o[j] = best;
                        argmax[b * d + j] = at;
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![bsz, d], out),
            Op::SetPool { a, counts: counts.to_vec(), kind, n, d, argmax },
            &[a],
        )
    }

    /// Elementwise Huber function of the residual `a`.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        let out = self
            .data(a)
            .iter()
            .map(|&x| if x.abs() <= delta { 0.5 * x * x } else { delta * (x.abs() - 0.5 * delta) })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out), Op::Huber { a, delta }, &[a])
    }

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate across
    /// calls until zeroed.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = self.nodes[idx].op {
                if self.nodes[idx].value.requires_grad {
                    self.nodes[idx].value.accumulate_grad(&g);
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n, shared_rhs } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if wants(a) {
                    send(a, &mut |ga| {
                        if shared_rhs {
                            gemm_nt(g, bd, ga, batch * m, n, k);
                        } else {
                            for s in 0..batch {
                                gemm_nt(
                                    &g[s * m * n..(s + 1) * m * n],
                                    &bd[s * k * n..(s + 1) * k * n],
                                    &mut ga[s * m * k..(s + 1) * m * k],
                                    m,
                                    n,
                                    k,
                                );
                            }
                        }
                    });
                }
                if wants(b) {
                    send(b, &mut |gb| {
                        if shared_rhs {
                            gemm_tn(ad, g, gb, batch * m, k, n);
                        } else {
                            for s in 0..batch {
                                gemm_tn(
                                    &ad[s * m * k..(s + 1) * m * k],
                                    &g[s * m * n..(s + 1) * m * n],
                                    &mut gb[s * k * n..(s + 1) * k * n],
                                    m,
                                    k,
                                    n,
                                );
                            }
                        }
                    });
                }
            }
            &Op::Transpose { a, batch, r, c } => send(a, &mut |ga| {
                for bi in 0..batch {
                    let base = bi * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            ga[base + i * c + j] += g[base + j * r + i];
                        }
                    }
                }
            }),
            &Op::Add { a, b } => {
                send(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                send(b, &mut |gb| {
                    let w = gb.len();
                    for ch in g.chunks(w) {
                        gb.iter_mut().zip(ch).for_each(|(x, y)| *x += y);
                    }
                });
            }
            &Op::Sub { a, b } => {
                send(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                send(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Scale { a, c } => send(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            &Op::Mul { a, b } => {
                let (ad, bd) = (self.data(a), self.data(b));
                send(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                send(b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            &Op::Sigmoid { a } => {
                let y = &node.value.data;
                send(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::MaskedSoftmax { a } => {
                let y = &node.value.data;
                let d = node.value.cols();
                send(*a, &mut |ga| {
                    for ((yr, gr), gar) in y.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = node.value.cols();
                let gamma = self.data(*gain);
                send(*x, &mut |gx| {
                    for (r, ((xh, gr), gxr)) in xhat.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut mean_dy = 0.0;
                        let mut mean_dy_xh = 0.0;
                        for j in 0..d {
                            let dy = gr[j] * gamma[j];
                            mean_dy += dy;
                            mean_dy_xh += dy * xh[j];
                        }
                        mean_dy /= d as f64;
                        mean_dy_xh /= d as f64;
                        for j in 0..d {
                            gxr[j] += inv_std[r] * (gr[j] * gamma[j] - mean_dy - xh[j] * mean_dy_xh);
                        }
                    }
                });
                send(*gain, &mut |gg| {
                    for (xh, gr) in xhat.chunks(d).zip(g.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xh[j];
                        }
                    }
                });
                send(*bias, &mut |gb| {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, valid, batch_stats } => {
                let c = node.value.cols();
                let gm = self.data(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_g_xh = vec![0.0; c];
                for (xh, gr) in xhat.chunks(c).zip(g.chunks(c)) {
                    for j in 0..c {
                        sum_g[j] += gr[j];
                        sum_g_xh[j] += gr[j] * xh[j];
                    }
                }
                let m = valid.iter().filter(|v| **v).count() as f64;
                send(*x, &mut |gx| {
                    for (r, ((xh, gr), gxr)) in xhat.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        for j in 0..c {
                            let mut v = gr[j];
                            if *batch_stats && valid[r] {
                                v -= (sum_g[j] + xh[j] * sum_g_xh[j]) / m;
                            }
                            gxr[j] += gm[j] * inv_std[j] * v;
                        }
                    }
                });
                send(*gamma, &mut |gg| gg.iter_mut().zip(&sum_g_xh).for_each(|(a, b)| *a += b));
                send(*beta, &mut |gb| gb.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b));
            }
            Op::Dropout { a, scale } => send(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * scale[i];
                }
            }),
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(widths) {
                    send(*p, &mut |gp| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += w;
                }
            }
            &Op::SumAxis { a, outer, len, inner } => send(a, &mut |ga| {
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            ga[base + i] += g[o * inner + i];
                        }
                    }
                }
            }),
            Op::SetPool { a, counts, kind, n, d, argmax } => {
                let (n, d) = (*n, *d);
                send(*a, &mut |ga| {
                    for (b, &cnt) in counts.iter().enumerate() {
                        let cnt = cnt.min(n);
                        if cnt == 0 {
                            continue;
                        }
                        let gb = &g[b * d..(b + 1) * d];
                        match kind {
                            PoolKind::Sum | PoolKind::Mean => {
                                let w = if *kind == PoolKind::Mean { 1.0 / cnt as f64 } else { 1.0 };
                                for i in 0..cnt {
                                    let row = &mut ga[(b * n + i) * d..(b * n + i + 1) * d];
                                    row.iter_mut().zip(gb).for_each(|(x, y)| *x += w * y);
                                }
                            }
                            PoolKind::Max => {
                                for j in 0..d {
                                    ga[(b * n + argmax[b * d + j]) * d + j] += gb[j];
                                }
                            }
                        }
                    }
                });
            }
            &Op::Huber { a, delta } => {
                let x = self.data(a);
                send(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * x[i].clamp(-delta, delta);
                    }
                });
            }
        }
    }
}

/// Compare tape gradients of `f` against central differences.
///
/// `f` receives the parameters as leaves in order and must return a scalar.
/// Returns the largest `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)` over all
/// coordinates.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |ps: &[Tensor], track: bool| -> (f64, Vec<Option<Vec<f64>>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .map(|p| {
                let mut t = Tensor::new(p.shape.clone(), p.data.clone());
                t.requires_grad = track;
                tape.leaf(t)
            })
            .collect();
        let loss = f(&mut tape, &vars);
        let value = tape.value(loss).item();
        if !track {
            return (value, vec![]);
        }
        tape.backward(loss);
        let grads = vars.iter().map(|v| tape.grad(*v).map(|g| g.to_vec())).collect();
        (value, grads)
    };
    let (_, analytic) = eval(params, true);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for pi in 0..params.len() {
        for j in 0..params[pi].len() {
            let orig = params[pi].data[j];
            work[pi].data[j] = orig + h;
            let (fp, _) = eval(&work, false);
            work[pi].data[j] = orig - h;
            let (fm, _) = eval(&work, false);
            work[pi].data[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let ad = analytic[pi].as_ref().map_or(0.0, |g| g[j]);
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    worst
}
