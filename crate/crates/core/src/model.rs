//! Set-attention network mapping an airspace snapshot to regional counts.
//!
//! Pipeline per sample: zero-padded `[N, D_in]` container → weight-shared
//! encoder (affine, batch norm, sigmoid, dropout per layer) → masked
//! multi-head self-attention with residual and layer norm → filtered pooling
//! over the valid rows → one small decoder per region.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{mix_seed, BatchNormStats, Mode, PoolKind, Tape, Tensor, Var};
use crate::features::{encode_snapshot, FeatureSet, NormStats};
use crate::geometry::AirspaceConfig;
use crate::snapshot::{LabeledSample, Snapshot};
use crate::train::TrainConfig;
use crate::{Error, Result};

pub const PARAMS_FORMAT: &str = "aerosense-params";
pub const PARAMS_VERSION: u32 = 1;
pub const DEFAULT_N_MAX: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Independent decoder per region.
    Decoupled,
    /// One shared trunk with a two-unit output.
    Coupled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output width of every encoder layer; the last must equal `d_model`.
    pub encoder_widths: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub d_hidden: usize,
    pub dropout: f64,
    pub attention_blocks: usize,
    pub n_max: usize,
    pub use_mask: bool,
    pub pooling: PoolKind,
    pub head_kind: HeadKind,
    pub features: FeatureSet,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_widths: vec![64, 128, 128],
            d_model: 128,
            heads: 4,
            d_hidden: 64,
            dropout: 0.1,
            attention_blocks: 1,
            n_max: DEFAULT_N_MAX,
            use_mask: true,
            pooling: PoolKind::Sum,
            head_kind: HeadKind::Decoupled,
            features: FeatureSet::all(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_in(&self) -> usize {
        self.features.dim()
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("model: {m}")));
        if self.encoder_widths.is_empty() {
            return bad("encoder needs at least one layer");
        }
        if self.encoder_widths.contains(&0) || self.d_hidden == 0 || self.n_max == 0 {
            return bad("layer widths, d_hidden and n_max must be positive");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.encoder_widths.last() != Some(&self.d_model) {
            return bad("last encoder width must equal d_model");
        }
        if self.attention_blocks == 0 {
            return bad("need at least one attention block");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.d_in() == 0 {
            return bad("every feature group dropped");
        }
        Ok(())
    }
}

/// One sample's normalized rows ready for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub t: f64,
    /// Row-major `[count, d_in]`.
    pub rows: Vec<f64>,
    pub count: usize,
    pub labels: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    /// `[B, N, D_in]`; rows at or past `counts[b]` are zero.
    pub x: Tensor,
    pub counts: Vec<usize>,
    /// `[B, N, N]`; 0 where both row and column are valid, −∞ elsewhere.
    pub mask: Tensor,
    /// `[B, 2]` as (AP, AR).
    pub labels: Tensor,
}

impl PaddedBatch {
    pub fn batch_size(&self) -> usize {
        self.counts.len()
    }

    pub fn n(&self) -> usize {
        self.x.shape()[1]
    }

    /// Flattened `[B·N]` row validity.
    pub fn valid_rows(&self) -> Vec<bool> {
        let n = self.n();
        self.counts.iter().flat_map(|&c| (0..n).map(move |i| i < c)).collect()
    }
}

/// Pack samples into a zero-padded container of `n_pad` rows each.
/// Any sample with more than `n_max` aircraft is an overflow; `n_pad` must
/// cover every count.
pub fn pad_batch(samples: &[&EncodedSample], d_in: usize, n_max: usize, n_pad: usize) -> Result<PaddedBatch> {
    if let Some(s) = samples.iter().find(|s| s.count > n_max) {
        return Err(Error::Overflow { count: s.count, n_max });
    }
    let b = samples.len();
    assert!(samples.iter().all(|s| s.count <= n_pad), "n_pad below a sample count");
    let mut x = vec![0.0; b * n_pad * d_in];
    let mut mask = vec![f64::NEG_INFINITY; b * n_pad * n_pad];
    let mut labels = Vec::with_capacity(b * 2);
    for (k, s) in samples.iter().enumerate() {
        if s.rows.len() != s.count * d_in {
            return Err(Error::data(format!("sample rows hold {} values, expected {}", s.rows.len(), s.count * d_in)));
        }
        x[k * n_pad * d_in..k * n_pad * d_in + s.rows.len()].copy_from_slice(&s.rows);
        for i in 0..s.count {
            let row = k * n_pad * n_pad + i * n_pad;
            mask[row..row + s.count].fill(0.0);
        }
        labels.extend(s.labels);
    }
    Ok(PaddedBatch {
        x: Tensor::new(vec![b, n_pad, d_in], x),
        counts: samples.iter().map(|s| s.count).collect(),
        mask: Tensor::new(vec![b, n_pad, n_pad], mask),
        labels: Tensor::new(vec![b, 2], labels),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_stats: BatchNormStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heads {
    Decoupled { ap: Head, ar: Head },
    Coupled(Head),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub y_ap_hat: f64,
    pub y_ar_hat: f64,
}

/// Handles produced by one forward pass.
pub struct Forward {
    /// Parameter leaves in [`ModelParams::parameters`] order.
    pub params: Vec<Var>,
    /// `[B, 2]` predictions as (AP, AR).
    pub pred: Var,
    /// Encoder output `[B, N, d_model]`.
    pub embeddings: Var,
    /// Per block, per head attention weights `[B, N, N]`.
    pub attention: Vec<Vec<Var>>,
}

/// One residual self-attention block over `e: [B, N, d_model]`.
///
/// `p` holds `W_Q, W_K, W_V` for each head in turn, then `W_O`, the
/// layer-norm gain and bias. Returns the block output and the per-head
/// attention weights.
pub fn masked_attention(tape: &mut Tape, e: Var, p: &[Var], heads: usize, mask: &Tensor) -> (Var, Vec<Var>) {
    assert_eq!(p.len(), 3 * heads + 3);
    let d_k = tape.value(p[0]).cols();
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for w in p[..3 * heads].chunks(3) {
        let q = tape.matmul(e, w[0]);
        let k = tape.matmul(e, w[1]);
        let v = tape.matmul(e, w[2]);
        let kt = tape.transpose(k);
        let s = tape.matmul(q, kt);
        let s = tape.scale(s, scale);
        let a = tape.masked_softmax(s, mask);
        weights.push(a);
        outs.push(tape.matmul(a, v));
    }
    let cat = tape.concat(&outs);
    let o = tape.matmul(cat, p[3 * heads]);
    let r = tape.add(e, o);
    (tape.layer_norm(r, p[3 * heads + 1], p[3 * heads + 2]), weights)
}

/// `W2 σ(W1 z + b1) + b2` with `p = [W1, b1, W2, b2]`.
pub fn decode_head(tape: &mut Tape, z: Var, p: &[Var]) -> Var {
    let u = tape.matmul(z, p[0]);
    let u = tape.add(u, p[1]);
    let u = tape.sigmoid(u);
    let y = tape.matmul(u, p[2]);
    tape.add(y, p[3])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Vec<EncoderLayer>,
    pub attention: Vec<AttentionBlock>,
    pub heads: Heads,
    pub norm: Option<NormStats>,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::new(vec![fan_in, fan_out], (0..fan_in * fan_out).map(|_| rng.random_range(-a..=a)).collect())
}

fn head(rng: &mut ChaCha8Rng, d_model: usize, d_hidden: usize, out: usize) -> Head {
    Head {
        w1: xavier(rng, d_model, d_hidden),
        b1: Tensor::zeros(&[d_hidden]),
        w2: xavier(rng, d_hidden, out),
        b2: Tensor::zeros(&[out]),
    }
}

impl ModelParams {
    /// Freshly initialized parameters for `config`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut encoder = Vec::new();
        let mut fan_in = config.d_in();
        for &w in &config.encoder_widths {
            encoder.push(EncoderLayer {
                w: xavier(&mut rng, fan_in, w),
                b: Tensor::zeros(&[w]),
                bn_gamma: Tensor::full(&[w], 1.0),
                bn_beta: Tensor::zeros(&[w]),
                bn_stats: BatchNormStats::new(w),
            });
            fan_in = w;
        }
        let (dm, dk, h) = (config.d_model, config.d_k(), config.heads);
        let attention = (0..config.attention_blocks)
            .map(|_| {
                let mats = |rng: &mut ChaCha8Rng| (0..h).map(|_| xavier(rng, dm, dk)).collect::<Vec<_>>();
                let wq = mats(&mut rng);
                let wk = mats(&mut rng);
                let wv = mats(&mut rng);
                AttentionBlock {
                    wq,
                    wk,
                    wv,
                    wo: xavier(&mut rng, h * dk, dm),
                    ln_gain: Tensor::full(&[dm], 1.0),
                    ln_bias: Tensor::zeros(&[dm]),
                }
            })
            .collect();
        let heads = match config.head_kind {
            HeadKind::Decoupled => Heads::Decoupled {
                ap: head(&mut rng, dm, config.d_hidden, 1),
                ar: head(&mut rng, dm, config.d_hidden, 1),
            },
            HeadKind::Coupled => Heads::Coupled(head(&mut rng, dm, config.d_hidden, 2)),
        };
        let mut p = ModelParams { config, encoder, attention, heads, norm: None };
        p.set_trainable(true);
        Ok(p)
    }

    fn set_trainable(&mut self, on: bool) {
        for t in self.parameters_mut() {
            t.set_requires_grad(on);
        }
    }

    /// Trainable tensors in a fixed canonical order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.extend([&l.w, &l.b, &l.bn_gamma, &l.bn_beta]);
        }
        for a in &self.attention {
            for j in 0..a.wq.len() {
                out.extend([&a.wq[j], &a.wk[j], &a.wv[j]]);
            }
            out.extend([&a.wo, &a.ln_gain, &a.ln_bias]);
        }
        match &self.heads {
            Heads::Decoupled { ap, ar } => {
                out.extend([&ap.w1, &ap.b1, &ap.w2, &ap.b2, &ar.w1, &ar.b1, &ar.w2, &ar.b2]);
            }
            Heads::Coupled(hd) => out.extend([&hd.w1, &hd.b1, &hd.w2, &hd.b2]),
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.encoder {
            out.extend([&mut l.w, &mut l.b, &mut l.bn_gamma, &mut l.bn_beta]);
        }
        for a in &mut self.attention {
            for ((q, k), v) in a.wq.iter_mut().zip(&mut a.wk).zip(&mut a.wv) {
                out.extend([q, k, v]);
            }
            out.extend([&mut a.wo, &mut a.ln_gain, &mut a.ln_bias]);
        }
        match &mut self.heads {
            Heads::Decoupled { ap, ar } => out.extend([
                &mut ap.w1, &mut ap.b1, &mut ap.w2, &mut ap.b2, &mut ar.w1, &mut ar.b1, &mut ar.w2, &mut ar.b2,
            ]),
            Heads::Coupled(hd) => out.extend([&mut hd.w1, &mut hd.b1, &mut hd.w2, &mut hd.b2]),
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Record the parameters on `tape` as leaves.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(trainable);
                t.zero_grad();
                tape.leaf(t)
            })
            .collect()
    }

    /// Full forward pass. In [`Mode::Train`] batch norm uses valid-row batch
    /// statistics (and updates the running ones) and dropout is active with
    /// stream `seed`.
    pub fn forward(&mut self, tape: &mut Tape, batch: &PaddedBatch, mode: Mode, seed: u64) -> Forward {
        let vars = self.register(tape, mode == Mode::Train);
        let mut stats = self.bn_stats();
        let out = self.forward_vars(tape, &vars, batch, mode, seed, &mut stats);
        if mode == Mode::Train {
            for (l, s) in self.encoder.iter_mut().zip(stats) {
                l.bn_stats = s;
            }
        }
        out
    }

    /// Forward pass over caller-supplied parameter leaves (same order as
    /// [`ModelParams::parameters`]).
    pub fn forward_vars(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &PaddedBatch,
        mode: Mode,
        seed: u64,
        stats: &mut [BatchNormStats],
    ) -> Forward {
        let cfg = &self.config;
        assert_eq!(batch.x.shape()[2], cfg.d_in(), "input width does not match the model");
        assert_eq!(vars.len(), self.parameters().len(), "parameter list length");
        let valid = batch.valid_rows();
        let mut at = 0;
        let mut take = |n: usize| {
            at += n;
            &vars[at - n..at]
        };

        let mut h = tape.constant(batch.x.clone());
        for (l, st) in stats.iter_mut().enumerate().take(self.encoder.len()) {
            let p = take(4);
            let a = tape.matmul(h, p[0]);
            let a = tape.add(a, p[1]);
            let a = tape.batch_norm(a, p[2], p[3], st, mode, Some(&valid));
            let a = tape.sigmoid(a);
            h = tape.dropout(a, cfg.dropout, mix_seed(&[seed, l as u64]), mode);
        }
        let embeddings = h;

        let mask = if cfg.use_mask { batch.mask.clone() } else { Tensor::zeros(batch.mask.shape()) };
        let mut attention = Vec::new();
        let mut e = h;
        for _ in 0..self.attention.len() {
            let (out, weights) = masked_attention(tape, e, take(3 * cfg.heads + 3), cfg.heads, &mask);
            e = out;
            attention.push(weights);
        }

        let z = tape.set_pool(e, &batch.counts, cfg.pooling);
        let pred = match self.heads {
            Heads::Decoupled { .. } => {
                let ap = decode_head(tape, z, take(4));
                let ar = decode_head(tape, z, take(4));
                tape.concat(&[ap, ar])
            }
            Heads::Coupled(_) => decode_head(tape, z, take(4)),
        };
        Forward { params: vars.to_vec(), embeddings, pred, attention }
    }

    /// Copy of the running batch-norm statistics of every encoder layer.
    pub fn bn_stats(&self) -> Vec<BatchNormStats> {
        self.encoder.iter().map(|l| l.bn_stats.clone()).collect()
    }

    /// Evaluation-mode forward pass on a fresh tape.
    pub fn forward_eval(&self, tape: &mut Tape, batch: &PaddedBatch) -> Forward {
        let vars = self.register(tape, false);
        self.forward_vars(tape, &vars, batch, Mode::Eval, 0, &mut self.bn_stats())
    }

    /// Evaluation-mode predictions.
    pub fn predict_batch(&self, batch: &PaddedBatch) -> Vec<Prediction> {
        let mut tape = Tape::new();
        let pred = self.forward_eval(&mut tape, batch).pred;
        tape.value(pred).data().chunks(2).map(|p| Prediction { y_ap_hat: p[0], y_ar_hat: p[1] }).collect()
    }

    /// Normalize and select the features of one snapshot.
    pub fn encode(&self, snapshot: &Snapshot, labels: [f64; 2], airspace: &AirspaceConfig) -> Result<EncodedSample> {
        let norm = self.norm.as_ref().ok_or_else(|| Error::config("model has no normalization statistics attached"))?;
        Ok(EncodedSample {
            t: snapshot.t,
            rows: encode_snapshot(snapshot, airspace, norm, &self.config.features),
            count: snapshot.len(),
            labels,
        })
    }

    pub fn encode_samples(&self, samples: &[LabeledSample], airspace: &AirspaceConfig) -> Result<Vec<EncodedSample>> {
        samples
            .iter()
            .map(|s| self.encode(&s.snapshot, [s.y_ap as f64, s.y_ar as f64], airspace))
            .collect()
    }

    /// Predictions for encoded samples, padded per chunk to the chunk's
    /// largest count.
    pub fn predict_encoded(&self, samples: &[EncodedSample], chunk: usize) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let refs: Vec<&EncodedSample> = part.iter().collect();
            let batch = self.pad(&refs)?;
            out.extend(self.predict_batch(&batch));
        }
        Ok(out)
    }

    /// Pad as the model expects: to the largest count of the batch when the
    /// mask is active, to the full `n_max` otherwise.
    pub fn pad(&self, samples: &[&EncodedSample]) -> Result<PaddedBatch> {
        let n_max = self.config.n_max;
        let widest = samples.iter().map(|s| s.count).max().unwrap_or(0);
        let n_pad = if self.config.use_mask { widest.clamp(1, n_max) } else { n_max };
        pad_batch(samples, self.config.d_in(), n_max, n_pad)
    }

    /// Per-head attention over the valid block of a single snapshot, from the
    /// last attention block. Each matrix is `count × count`, row-major.
    pub fn attention_maps(&self, sample: &EncodedSample) -> Result<Vec<Vec<f64>>> {
        let batch = self.pad(&[sample])?;
        let mut tape = Tape::new();
        let attention = self.forward_eval(&mut tape, &batch).attention;
        let (n, c) = (batch.n(), sample.count);
        let last = attention.last().expect("at least one attention block");
        Ok(last
            .iter()
            .map(|a| {
                let d = tape.value(*a).data();
                (0..c).flat_map(|i| d[i * n..i * n + c].iter().copied()).collect()
            })
            .collect())
    }

    /// Shape and finiteness checks against the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let fresh = ModelParams::init(ModelConfig { init_seed: 0, ..self.config.clone() })?;
        let ours = self.parameters();
        let want = fresh.parameters();
        if ours.len() != want.len() {
            return Err(Error::data("parameter count does not match the configuration"));
        }
        for (i, (a, b)) in ours.iter().zip(&want).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::data(format!("parameter {i} has shape {:?}, expected {:?}", a.shape(), b.shape())));
            }
            if a.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {i} holds a non-finite value")));
            }
        }
        for (l, w) in self.encoder.iter().zip(&self.config.encoder_widths) {
            let s = &l.bn_stats;
            if s.mean.len() != *w || s.var.len() != *w {
                return Err(Error::data("batch-norm statistics do not match layer width"));
            }
            if s.mean.iter().chain(&s.var).any(|v| !v.is_finite()) || s.var.iter().any(|v| *v < 0.0) {
                return Err(Error::NonFinite("batch-norm statistics must be finite, variance non-negative".into()));
            }
        }
        if let Some(n) = &self.norm {
            n.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self, training: Option<&TrainConfig>) -> Result<String> {
        let file = ParamFileRef { format: PARAMS_FORMAT, version: PARAMS_VERSION, training, params: self };
        Ok(serde_json::to_string(&file)?)
    }

    /// Parse and validate a parameter file body.
    pub fn from_json(text: &str) -> Result<(ModelParams, Option<TrainConfig>)> {
        let file: ParamFile = serde_json::from_str(text)?;
        if file.format != PARAMS_FORMAT || file.version != PARAMS_VERSION {
            return Err(Error::data(format!("unsupported parameter file {} v{}", file.format, file.version)));
        }
        let mut params = file.params;
        params.validate()?;
        params.set_trainable(true);
        Ok((params, file.training))
    }

    pub fn save(&self, path: &Path, training: Option<&TrainConfig>) -> Result<()> {
        fs::write(path, self.to_json(training)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ModelParams, Option<TrainConfig>)> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize)]
struct ParamFileRef<'a> {
    format: &'a str,
    version: u32,
    training: Option<&'a TrainConfig>,
    params: &'a ModelParams,
}

#[derive(Deserialize)]
struct ParamFile {
    format: String,
    version: u32,
    training: Option<TrainConfig>,
    params: ModelParams,
}

/// Mean over the batch of the per-sample sum of regional Huber losses.
pub fn huber_loss(tape: &mut Tape, pred: Var, labels: Var, delta: f64) -> Var {
    let b = tape.value(pred).shape()[0];
    let r = tape.sub(labels, pred);
    let h = tape.huber(r, delta);
    let s = tape.sum_all(h);
    tape.scale(s, 1.0 / b as f64)
}
