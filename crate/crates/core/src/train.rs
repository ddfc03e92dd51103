//! Optimization, metrics, dayparting and reference baselines.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{mix_seed, Mode, Tape, Tensor};
use crate::geometry::AirspaceConfig;
use crate::features::{fit_norm_stats, NormStats};
use crate::model::{huber_loss, EncodedSample, ModelConfig, ModelParams, Prediction};
use crate::snapshot::{count_labels, LabeledSample};
use crate::{Error, Result};

/// A loss counts as improved only when it drops by at least this much.
pub const MIN_IMPROVEMENT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub huber_delta: f64,
    /// Batches per size-sorting pool. 1 keeps the plain shuffle; larger
    /// values group snapshots of similar size to cut padding.
    pub bucket_pool: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_size: 64,
            max_epochs: 100,
            early_stop_patience: 10,
            plateau_patience: 5,
            plateau_factor: 0.5,
            huber_delta: 1.0,
            bucket_pool: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.plateau_factor, self.huber_delta, self.eps];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config("train: lr, plateau_factor, huber_delta and eps must be positive"));
        }
        if self.batch_size == 0
            || self.max_epochs == 0
            || self.early_stop_patience == 0
            || self.plateau_patience == 0
            || self.bucket_pool == 0
        {
            return Err(Error::config("train: batch size, epochs, patience and bucket pool must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.plateau_factor >= 1.0 {
            return Err(Error::config("train: betas must lie in [0, 1), plateau_factor below 1"));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, m: vec![], v: vec![], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without improvement.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub lr: f64,
    factor: f64,
    patience: usize,
    best: f64,
    stalls: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler { lr, factor, patience, best: f64::INFINITY, stalls: 0 }
    }

    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - MIN_IMPROVEMENT {
            self.best = val_loss;
            self.stalls = 0;
        } else {
            self.stalls += 1;
            if self.stalls >= self.patience {
                self.lr *= self.factor;
                self.stalls = 0;
            }
        }
        self.lr
    }
}

/// Signals a stop once `patience` epochs pass without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, since: 0 }
    }

    /// Returns true when training should stop after this epoch.
    pub fn update(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best - MIN_IMPROVEMENT {
            self.best = val_loss;
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.since >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Mean per-sample objective in evaluation mode.
pub fn dataset_loss(params: &ModelParams, samples: &[EncodedSample], delta: f64, chunk: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::data("cannot compute a loss over zero samples"));
    }
    let mut total = 0.0;
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&EncodedSample> = part.iter().collect();
        let batch = params.pad(&refs)?;
        let mut tape = Tape::new();
        let f = params.forward_eval(&mut tape, &batch);
        let labels = tape.constant(batch.labels.clone());
        let loss = huber_loss(&mut tape, f.pred, labels, delta);
        total += tape.value(loss).item() * part.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// One epoch of batches: shuffle, sort each pool of `pool` batches by set
/// size, cut into batches, shuffle the batch order.
pub fn epoch_batches(counts: &[usize], batch_size: usize, pool: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.shuffle(rng);
    if pool <= 1 {
        return order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    }
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for chunk in order.chunks_mut(batch_size * pool) {
        chunk.sort_by_key(|&i| counts[i]);
        batches.extend(chunk.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} is {v}")))
    }
}

/// Fit `params` on `train`, selecting the epoch with the best loss on `val`.
pub fn train(
    mut params: ModelParams,
    train: &[EncodedSample],
    val: &[EncodedSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::data("training and validation sets must be non-empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let counts: Vec<usize> = train.iter().map(|s| s.count).collect();
    let mut best = (params.clone(), 0, f64::INFINITY);
    let mut log = Vec::new();
    let mut lr = cfg.lr;

    for epoch in 0..cfg.max_epochs {
        let mut sum = 0.0;
        for (bi, idx) in epoch_batches(&counts, cfg.batch_size, cfg.bucket_pool, &mut rng).iter().enumerate() {
            let refs: Vec<&EncodedSample> = idx.iter().map(|&i| &train[i]).collect();
            let batch = params.pad(&refs)?;
            let mut tape = Tape::new();
            let f = params.forward(&mut tape, &batch, Mode::Train, mix_seed(&[cfg.seed, epoch as u64, bi as u64]));
            let labels = tape.constant(batch.labels.clone());
            let loss = huber_loss(&mut tape, f.pred, labels, cfg.huber_delta);
            let value = finite(tape.value(loss).item(), &format!("training loss at epoch {epoch}, batch {bi}"))?;
            sum += value * idx.len() as f64;
            tape.backward(loss);
            let grads: Vec<Vec<f64>> = f
                .params
                .iter()
                .map(|v| tape.grad(*v).map_or_else(|| vec![0.0; tape.value(*v).len()], <[f64]>::to_vec))
                .collect();
            adam.step(params.parameters_mut(), &grads, lr);
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = finite(dataset_loss(&params, val, cfg.huber_delta, 256)?, "validation loss")?;
        if val_loss < best.2 - MIN_IMPROVEMENT {
            best = (params.clone(), epoch, val_loss);
        }
        log.push(EpochLog { epoch, train_loss, val_loss, lr });
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.3e}");
        lr = sched.step(val_loss);
        if stopper.update(val_loss) {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let (params, best_epoch, best_val_loss) = best;
    Ok(TrainOutcome { params, log, best_epoch, best_val_loss })
}

/// Fit normalization on `train`, initialize from `model`, and train.
///
/// `norm` overrides the fitted statistics when given.
pub fn fit_model(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    airspace: &AirspaceConfig,
    norm: Option<NormStats>,
) -> Result<TrainOutcome> {
    let mut params = ModelParams::init(model.clone())?;
    params.norm = Some(match norm {
        Some(n) => n,
        None => fit_norm_stats(train_set)?,
    });
    let tr = params.encode_samples(train_set, airspace)?;
    let va = params.encode_samples(val_set, airspace)?;
    train(params, &tr, &va, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub ap: Metrics,
    pub ar: Metrics,
}

/// MAE, RMSE and R² about the mean of `y`. With constant `y`, R² is 1 for a
/// perfect fit and 0 otherwise.
pub fn metrics(y: &[f64], y_hat: &[f64]) -> Result<Metrics> {
    if y.is_empty() || y.len() != y_hat.len() {
        return Err(Error::data("metrics need equal, non-zero numbers of labels and predictions"));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let (mut abs, mut ss_res, mut ss_tot) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(y_hat) {
        abs += (a - b).abs();
        ss_res += (a - b) * (a - b);
        ss_tot += (a - mean) * (a - mean);
    }
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(Metrics { mae: abs / n, rmse: (ss_res / n).sqrt(), r2 })
}

pub fn evaluate_predictions(preds: &[Prediction], labels: &[[f64; 2]]) -> Result<RegionMetrics> {
    let col = |i: usize| labels.iter().map(|l| l[i]).collect::<Vec<_>>();
    let ap_hat: Vec<f64> = preds.iter().map(|p| p.y_ap_hat).collect();
    let ar_hat: Vec<f64> = preds.iter().map(|p| p.y_ar_hat).collect();
    Ok(RegionMetrics { ap: metrics(&col(0), &ap_hat)?, ar: metrics(&col(1), &ar_hat)? })
}

/// Model predictions and metrics over encoded samples.
pub fn evaluate(params: &ModelParams, samples: &[EncodedSample]) -> Result<(Vec<Prediction>, RegionMetrics)> {
    let preds = params.predict_encoded(samples, 256)?;
    if let Some(p) = preds.iter().find(|p| !(p.y_ap_hat.is_finite() && p.y_ar_hat.is_finite())) {
        return Err(Error::NonFinite(format!("prediction {p:?}")));
    }
    let labels: Vec<[f64; 2]> = samples.iter().map(|s| s.labels).collect();
    let m = evaluate_predictions(&preds, &labels)?;
    Ok((preds, m))
}

pub const DAYPART_BINS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaypartBin {
    /// e.g. `"08:00-10:00"`.
    pub interval: String,
    pub count: usize,
    /// Absent for an empty bin.
    pub mae_ap: Option<f64>,
    pub mae_ar: Option<f64>,
}

/// Two-hour bin of the time of day of `t` seconds.
pub fn daypart_bin(t: f64) -> usize {
    ((t.rem_euclid(86_400.0) / 7200.0) as usize).min(DAYPART_BINS - 1)
}

pub fn daypart_report(times: &[f64], preds: &[Prediction], labels: &[[f64; 2]]) -> Vec<DaypartBin> {
    let mut acc = vec![(0usize, 0.0, 0.0); DAYPART_BINS];
    for ((t, p), l) in times.iter().zip(preds).zip(labels) {
        let a = &mut acc[daypart_bin(*t)];
        a.0 += 1;
        a.1 += (l[0] - p.y_ap_hat).abs();
        a.2 += (l[1] - p.y_ar_hat).abs();
    }
    acc.into_iter()
        .enumerate()
        .map(|(i, (n, ap, ar))| DaypartBin {
            interval: format!("{:02}:00-{:02}:00", 2 * i, 2 * i + 2),
            count: n,
            mae_ap: (n > 0).then(|| ap / n as f64),
            mae_ar: (n > 0).then(|| ar / n as f64),
        })
        .collect()
}

/// Predict the future counts as the counts observed in the input snapshot.
pub fn baseline_persistence(samples: &[LabeledSample], airspace: &AirspaceConfig) -> Vec<Prediction> {
    samples
        .iter()
        .map(|s| {
            let (ap, ar) = count_labels(&s.snapshot, airspace);
            Prediction { y_ap_hat: ap as f64, y_ar_hat: ar as f64 }
        })
        .collect()
}

pub const FLOW_BIN_S: f64 = 900.0;
pub const LOOKBACK_BINS: usize = 96;
pub const TREND_WINDOW: usize = 25;

/// Regional counts averaged over a fixed time grid; bins without
/// observations are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSeries {
    pub bin_s: f64,
    /// Index of the first bin (`floor(t / bin_s)`).
    pub first: i64,
    pub values: Vec<Option<[f64; 2]>>,
}

impl FlowSeries {
    /// Average the observed counts `(time, [ap, ar])` per bin.
    pub fn from_observations(obs: &[(f64, [f64; 2])], bin_s: f64) -> Self {
        let bin = |t: f64| (t / bin_s).floor() as i64;
        let Some(first) = obs.iter().map(|o| bin(o.0)).min() else {
            return FlowSeries { bin_s, first: 0, values: vec![] };
        };
        let last = obs.iter().map(|o| bin(o.0)).max().unwrap_or(first);
        let mut acc = vec![(0usize, [0.0; 2]); (last - first + 1) as usize];
        for (t, c) in obs {
            let a = &mut acc[(bin(*t) - first) as usize];
            a.0 += 1;
            a.1[0] += c[0];
            a.1[1] += c[1];
        }
        let values = acc.into_iter().map(|(n, s)| (n > 0).then(|| [s[0] / n as f64, s[1] / n as f64])).collect();
        FlowSeries { bin_s, first, values }
    }

    /// Counts at label time (`t + horizon`) of each sample.
    pub fn from_samples(samples: &[LabeledSample], bin_s: f64) -> Self {
        let obs: Vec<(f64, [f64; 2])> = samples.iter().map(|s| (s.t() + s.horizon_s, s.labels())).collect();
        Self::from_observations(&obs, bin_s)
    }

    /// The `len` complete bins strictly before the bin containing `t`.
    pub fn window(&self, t: f64, len: usize) -> Option<Vec<[f64; 2]>> {
        let end = (t / self.bin_s).floor() as i64 - self.first;
        let start = end - len as i64;
        if start < 0 || end > self.values.len() as i64 {
            return None;
        }
        self.values[start as usize..end as usize].iter().copied().collect()
    }
}

/// Moving average with edge replication; output has the input's length.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = x.len() as i64;
    (0..n)
        .map(|i| {
            (i - half as i64..=i + half as i64).map(|j| x[j.clamp(0, n - 1) as usize]).sum::<f64>()
                / (2 * half + 1) as f64
        })
        .collect()
}

/// Trend/remainder linear forecaster over a 24 h look-back of 15 min bins.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLookback {
    pub lookback: usize,
    pub window: usize,
    /// `(2·lookback + 1) × 2` weights: trend, remainder, intercept.
    pub weights: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LookbackPredictions {
    /// `None` where the history was insufficient.
    pub preds: Vec<Option<Prediction>>,
    pub skipped: usize,
}

fn design_row(hist: &[[f64; 2]], region: usize, window: usize) -> Vec<f64> {
    let x: Vec<f64> = hist.iter().map(|h| h[region]).collect();
    let trend = moving_average(&x, window);
    let rem: Vec<f64> = x.iter().zip(&trend).map(|(a, b)| a - b).collect();
    let mut row = trend;
    row.extend(rem);
    row.push(1.0);
    row
}

/// Minimum-norm least squares through the pseudo-inverse of `XᵀX`.
///
/// The trend and remainder blocks sum to the raw window, so the design is
/// always rank deficient; eigenvalues below a relative tolerance are dropped.
fn min_norm_lstsq(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    let eig = xtx.symmetric_eigen();
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    if !top.is_finite() || top <= 0.0 {
        return Err(Error::data("least-squares design is degenerate or non-finite"));
    }
    let tol = top * 1e-12 * x.ncols() as f64;
    let mut w = DMatrix::zeros(x.ncols(), y.ncols());
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > tol {
            let v = eig.eigenvectors.column(k);
            w += v * (v.transpose() * &xty) / l;
        }
    }
    Ok(w)
}

impl LinearLookback {
    /// Least-squares fit on `(t, labels)` pairs whose history is complete.
    /// Returns the model and the number of skipped pairs.
    pub fn fit(series: &FlowSeries, targets: &[(f64, [f64; 2])], lookback: usize, window: usize) -> Result<(Self, usize)> {
        let p = 2 * lookback + 1;
        let usable: Vec<(Vec<[f64; 2]>, [f64; 2])> =
            targets.iter().filter_map(|(t, y)| series.window(*t, lookback).map(|h| (h, *y))).collect();
        let skipped = targets.len() - usable.len();
        if usable.is_empty() {
            return Err(Error::data("no training target has a complete look-back window"));
        }
        let mut weights = DMatrix::zeros(p, 2);
        for region in 0..2 {
            let rows: Vec<Vec<f64>> = usable.iter().map(|(h, _)| design_row(h, region, window)).collect();
            let x = DMatrix::from_fn(usable.len(), p, |i, j| rows[i][j]);
            let y = DMatrix::from_fn(usable.len(), 1, |i, _| usable[i].1[region]);
            let w = min_norm_lstsq(&x, &y)?;
            weights.set_column(region, &w.column(0));
        }
        Ok((LinearLookback { lookback, window, weights }, skipped))
    }

    pub fn predict_at(&self, series: &FlowSeries, t: f64) -> Option<Prediction> {
        let h = series.window(t, self.lookback)?;
        let out = [0, 1].map(|r| {
            design_row(&h, r, self.window).iter().zip(self.weights.column(r).iter()).map(|(a, b)| a * b).sum::<f64>()
        });
        Some(Prediction { y_ap_hat: out[0], y_ar_hat: out[1] })
    }

    pub fn predict(&self, series: &FlowSeries, times: &[f64]) -> LookbackPredictions {
        let preds: Vec<Option<Prediction>> = times.iter().map(|t| self.predict_at(series, *t)).collect();
        let skipped = preds.iter().filter(|p| p.is_none()).count();
        LookbackPredictions { preds, skipped }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn adam_matches_scalar_oracle() {
        // Independent scalar Adam written out for a single coordinate.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 3e-4);
        let grads = [0.5, -1.25, 2.0, 0.0, 1e-3];
        let (mut x, mut m, mut v) = (1.7f64, 0.0f64, 0.0f64);
        let mut t = Tensor::new(vec![1], vec![1.7]);
        let mut adam = Adam::new(b1, b2, eps);
        for (k, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let step = (k + 1) as i32;
            x -= lr * (m / (1.0 - b1.powi(step))) / ((v / (1.0 - b2.powi(step))).sqrt() + eps);
            adam.step(vec![&mut t], &[vec![*g]], lr);
            assert!((t.data()[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_grad_and_symmetry() {
        let mut a = Tensor::new(vec![3], vec![1.0, 2.0, 2.0]);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.step(vec![&mut a], &[vec![0.0, 0.3, 0.3]], 0.1);
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(a.data()[1], a.data()[2]);
    }

    #[test]
    fn plateau_rules() {
        let mut s = PlateauScheduler::new(1.0, 0.5, 5);
        for i in 0..20 {
            assert_eq!(s.step(10.0 - i as f64), 1.0);
        }
        let mut s = PlateauScheduler::new(1.0, 0.5, 5);
        s.step(1.0);
        let lrs: Vec<f64> = (0..5).map(|_| s.step(1.0)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 1.0, 0.5]);
        let mut s = PlateauScheduler::new(1.0, 0.5, 5);
        s.step(1.0);
        for _ in 0..4 {
            s.step(1.0);
        }
        assert_eq!(s.step(0.5), 1.0);
        for _ in 0..4 {
            assert_eq!(s.step(0.5), 1.0);
        }
        // A decrease smaller than the threshold is a stall.
        assert_eq!(s.step(0.5 - 1e-9), 0.5);
    }

    #[test]
    fn early_stop_after_ten_flat_epochs() {
        let mut e = EarlyStopping::new(10);
        assert!(!e.update(3.0));
        let stops: Vec<bool> = (0..10).map(|_| e.update(3.0)).collect();
        assert_eq!(stops.iter().position(|s| *s), Some(9));
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, Metrics { mae: 0.0, rmse: 0.0, r2: 1.0 });
        assert_eq!(metrics(&[1.0, 2.0, 3.0], &[2.0; 3]).unwrap().r2, 0.0);
        let m = metrics(&[0.0, 0.0], &[1.0, -1.0]).unwrap();
        assert_eq!((m.mae, m.rmse), (1.0, 1.0));
        assert_eq!(metrics(&[4.0, 4.0], &[4.0, 4.0]).unwrap().r2, 1.0);
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn daypart_examples() {
        assert_eq!(daypart_bin(8.5 * 3600.0), 4);
        assert_eq!(daypart_bin(86_400.0 + 60.0), 0);
        let times = [8.5 * 3600.0, 9.0 * 3600.0, 23.9 * 3600.0];
        let preds = [Prediction { y_ap_hat: 0.0, y_ar_hat: 0.0 }; 3];
        let labels = [[2.0, 2.0]; 3];
        let r = daypart_report(&times, &preds, &labels);
        assert_eq!(r.len(), 12);
        assert_eq!(r[4].interval, "08:00-10:00");
        assert_eq!(r[4].count, 2);
        assert_eq!(r[0].count, 0);
        assert_eq!(r[0].mae_ap, None);
        for b in r.iter().filter(|b| b.count > 0) {
            assert_eq!((b.mae_ap, b.mae_ar), (Some(2.0), Some(2.0)));
        }
    }

    #[test]
    fn moving_average_replicates_edges() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let m = moving_average(&x, 3);
        assert_eq!(m, vec![4.0 / 3.0, 2.0, 3.0, 4.0, 14.0 / 3.0]);
        assert_eq!(moving_average(&[7.0; 10], 25), vec![7.0; 10]);
    }

    fn series_of(f: impl Fn(usize) -> f64, n: usize) -> (FlowSeries, Vec<(f64, [f64; 2])>) {
        let obs: Vec<(f64, [f64; 2])> = (0..n).map(|i| (i as f64 * 900.0 + 450.0, [f(i), 2.0 * f(i)])).collect();
        let series = FlowSeries::from_observations(&obs, 900.0);
        // Target: the value one bin ahead of the query time.
        let targets = (LOOKBACK_BINS..n - 1).map(|i| (i as f64 * 900.0 + 10.0, [f(i + 1), 2.0 * f(i + 1)])).collect();
        (series, targets)
    }

    fn training_mse(f: impl Fn(usize) -> f64 + Copy, n: usize) -> (f64, f64, usize) {
        let (series, targets) = series_of(f, n);
        let (model, skipped) = LinearLookback::fit(&series, &targets, LOOKBACK_BINS, TREND_WINDOW).unwrap();
        let mut mse = 0.0;
        for (t, y) in &targets {
            let p = model.predict_at(&series, *t).unwrap();
            mse += (p.y_ap_hat - y[0]).powi(2);
        }
        let ys: Vec<f64> = targets.iter().map(|t| t.1[0]).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / ys.len() as f64;
        (mse / targets.len() as f64, var, skipped)
    }

    #[test]
    fn lookback_constant_is_fixed_point() {
        let (mse, _, skipped) = training_mse(|_| 6.0, 300);
        assert!(mse < 1e-18, "constant mse {mse}");
        assert_eq!(skipped, 0);
        let (series, targets) = series_of(|_| 6.0, 300);
        let (m, _) = LinearLookback::fit(&series, &targets, LOOKBACK_BINS, TREND_WINDOW).unwrap();
        let p = m.predict_at(&series, 250.0 * 900.0).unwrap();
        assert!((p.y_ap_hat - 6.0).abs() < 1e-9 && (p.y_ar_hat - 12.0).abs() < 1e-9);
    }

    #[test]
    fn lookback_ramp_and_square_wave() {
        // Closed form: a ramp's next value is an affine function of its past.
        let (mse, _, _) = training_mse(|i| 0.5 * i as f64 + 3.0, 400);
        assert!(mse < 1e-12, "ramp mse {mse}");
        let (mse, var, _) = training_mse(|i| if (i % 96) < 48 { 10.0 } else { 2.0 }, 600);
        assert!(mse < var, "square wave mse {mse} var {var}");
    }

    #[test]
    fn lookback_skips_short_history() {
        let (series, _) = series_of(|i| i as f64, 120);
        let (model, _) = {
            let (s, t) = series_of(|i| i as f64, 300);
            LinearLookback::fit(&s, &t, LOOKBACK_BINS, TREND_WINDOW).unwrap()
        };
        let r = model.predict(&series, &[10.0 * 900.0, 100.0 * 900.0, 500.0 * 900.0]);
        assert_eq!(r.skipped, 2);
        assert!(r.preds[1].is_some());
        assert!(LinearLookback::fit(&series, &[(900.0, [0.0, 0.0])], LOOKBACK_BINS, TREND_WINDOW).is_err());
    }

    fn toy_samples(n: usize) -> Vec<EncodedSample> {
        (0..n)
            .map(|k| EncodedSample {
                t: k as f64,
                rows: (0..2 * 18).map(|i| ((i * 7 + k * 3) % 11) as f64 / 5.0 - 1.0).collect(),
                count: 2,
                labels: [k as f64 + 1.0, 3.0 - k as f64],
            })
            .collect()
    }

    fn toy_config() -> ModelConfig {
        ModelConfig {
            encoder_widths: vec![8, 8],
            d_model: 8,
            heads: 2,
            d_hidden: 8,
            dropout: 0.0,
            n_max: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn memorizes_two_samples() {
        let data = toy_samples(2);
        let cfg = TrainConfig { lr: 1e-2, batch_size: 2, max_epochs: 2000, early_stop_patience: 2000, ..Default::default() };
        let out = train(ModelParams::init(toy_config()).unwrap(), &data, &data, &cfg).unwrap();
        let last = out.log.last().unwrap();
        assert!(last.train_loss < 1e-3, "train loss {}", last.train_loss);
    }

    #[test]
    fn training_is_reproducible_and_keeps_best() {
        let data = toy_samples(6);
        let cfg = TrainConfig { lr: 5e-3, batch_size: 4, max_epochs: 15, seed: 9, ..Default::default() };
        let model = ModelConfig { dropout: 0.2, ..toy_config() };
        let a = train(ModelParams::init(model.clone()).unwrap(), &data[..4], &data[4..], &cfg).unwrap();
        let b = train(ModelParams::init(model).unwrap(), &data[..4], &data[4..], &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        let final_val = a.log.last().unwrap().val_loss;
        assert!(a.best_val_loss <= final_val);
        let min = a.log.iter().map(|l| l.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_val_loss, min);
    }

    #[test]
    fn epoch_batches_cover_every_sample_once() {
        let counts: Vec<usize> = (0..203).map(|i| (i * 37) % 50).collect();
        for pool in [1, 4] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let batches = epoch_batches(&counts, 16, pool, &mut rng);
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..203).collect::<Vec<_>>());
            assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= 16));
        }
        let spread = |b: &Vec<usize>| {
            let sizes = b.iter().map(|&i| counts[i]);
            sizes.clone().max().unwrap() - sizes.min().unwrap()
        };
        let mean_spread = |pool: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let bs = epoch_batches(&counts, 16, pool, &mut rng);
            bs.iter().map(spread).sum::<usize>() as f64 / bs.len() as f64
        };
        assert!(mean_spread(4) < 0.5 * mean_spread(1));
    }

    #[test]
    fn nonfinite_loss_aborts() {
        let mut data = toy_samples(2);
        data[0].labels[0] = f64::NAN;
        let cfg = TrainConfig { max_epochs: 1, ..Default::default() };
        let err = train(ModelParams::init(toy_config()).unwrap(), &data, &data, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(err.exit_code(), 4);
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..60)) {
            let (y, yh): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = metrics(&y, &yh).unwrap();
            prop_assert!(m.rmse >= m.mae - 1e-12);
            prop_assert!(m.r2 <= 1.0);
        }

        #[test]
        fn daypart_weighted_average_is_overall_mae(
            rows in prop::collection::vec((0.0f64..172_800.0, -5.0f64..5.0, 0u32..30), 1..200)
        ) {
            let times: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let labels: Vec<[f64; 2]> = rows.iter().map(|r| [r.2 as f64, r.2 as f64 * 2.0]).collect();
            let preds: Vec<Prediction> =
                rows.iter().map(|r| Prediction { y_ap_hat: r.2 as f64 + r.1, y_ar_hat: r.2 as f64 * 2.0 - r.1 }).collect();
            let overall = evaluate_predictions(&preds, &labels).unwrap();
            let bins = daypart_report(&times, &preds, &labels);
            let n: usize = bins.iter().map(|b| b.count).sum();
            prop_assert_eq!(n, rows.len());
            let w: f64 = bins.iter().filter_map(|b| b.mae_ap.map(|m| m * b.count as f64)).sum::<f64>() / n as f64;
            prop_assert!((w - overall.ap.mae).abs() < 1e-12);
        }
    }
}
