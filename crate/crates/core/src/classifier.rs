//! Logistic classifier trained on purified embeddings with a penalty on its
//! alignment with unintended feature directions.
//!
//! ```text
//! x+   = x - relu(x W-) W-^T
//! loss = sum_n w_n * bce(theta . x+_n, y_n) / sum_n w_n + beta * |theta^T W-|_1
//! ```
//!
//! ```text
//! CLF1 layout (little endian)
//! 0       4     magic "CLF1"
//! 4       4     version u32 = 1
//! 8       4     dim u32
//! 12      4     beta f32
//! 16      4     n_unintended u32
//! 20      4n    sorted feature ids, u32 each
//! ..      32    SHA-256 digest of the SAE1 file
//! ..      4dim  theta, f32 each
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::codec::{dim_u32, put_f32, put_u32, ByteReader};
use crate::embedding::{class_weights, EmbeddingDataset};
use crate::error::{Error, FormatError, Result};
use crate::judge::UnintendedSet;
use crate::optim::{AdamWConfig, AdamWState, PlateauSchedule};
use crate::rng::seeded;
use crate::sae::TopKSae;

pub const CLF_MAGIC: [u8; 4] = *b"CLF1";
pub const CLF_VERSION: u32 = 1;

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Logistic function, accurate for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Unintended feature directions `W-` (`dim x m`) with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Purifier {
    w_minus: Array2<f64>,
    feature_ids: Vec<usize>,
    sae_digest: [u8; 32],
}

impl Purifier {
    pub fn from_sae(sae: &TopKSae<f32>, unintended: &UnintendedSet) -> Result<Self> {
        let ids = &unintended.feature_ids;
        if let Some(w) = ids.windows(2).find(|w| w[0] >= w[1]) {
            return Err(if w[0] == w[1] {
                Error::DuplicateFeature(w[0])
            } else {
                Error::InvalidConfig("unintended feature ids must be sorted".into())
            });
        }
        Ok(Self {
            w_minus: sae.columns_f64(ids)?,
            feature_ids: ids.clone(),
            sae_digest: sae.digest()?,
        })
    }

    /// A purifier not tied to any SAE file; its digest is all zeros.
    pub fn from_matrix(w_minus: Array2<f64>) -> Self {
        let m = w_minus.ncols();
        Self {
            w_minus,
            feature_ids: (0..m).collect(),
            sae_digest: [0; 32],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_matrix(Array2::zeros((dim, 0)))
    }

    pub fn dim(&self) -> usize {
        self.w_minus.nrows()
    }

    pub fn w_minus(&self) -> ArrayView2<'_, f64> {
        self.w_minus.view()
    }

    pub fn feature_ids(&self) -> &[usize] {
        &self.feature_ids
    }

    pub fn sae_digest(&self) -> [u8; 32] {
        self.sae_digest
    }

    pub fn purify(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        purify(x, self.w_minus.view())
    }

    /// Purifies every row. Rows with no positive unintended pre-activation are
    /// copied unchanged.
    pub fn purify_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.ncols(),
            });
        }
        let mut out = x.to_owned();
        if self.w_minus.ncols() == 0 {
            return Ok(out);
        }
        let pre = x.dot(&self.w_minus);
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(pre.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut row, p)| subtract_active(&mut row.view_mut(), p, self.w_minus.view()));
        Ok(out)
    }

    /// `|theta^T W-|_1`
    pub fn alignment_l1(&self, theta: ArrayView1<'_, f64>) -> f64 {
        theta.dot(&self.w_minus).iter().map(|a| a.abs()).sum()
    }
}

fn subtract_active(row: &mut ndarray::ArrayViewMut1<'_, f64>, pre: ArrayView1<'_, f64>, w: ArrayView2<'_, f64>) {
    for (j, &a) in pre.iter().enumerate() {
        if a > 0.0 {
            row.scaled_add(-a, &w.column(j));
        }
    }
}

/// `x - relu(x W-) W-^T`; returns `x` bit-for-bit when no unintended feature
/// has a positive pre-activation.
pub fn purify(x: ArrayView1<'_, f64>, w_minus: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    if x.len() != w_minus.nrows() {
        return Err(Error::DimensionMismatch {
            expected: w_minus.nrows(),
            actual: x.len(),
        });
    }
    let mut out = x.to_owned();
    if w_minus.ncols() > 0 {
        let pre = x.dot(&w_minus);
        subtract_active(&mut out.view_mut(), pre.view(), w_minus);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticClassifier {
    pub theta: Array1<f64>,
    /// Only present when trained with `fit_intercept`; not representable in CLF1.
    pub intercept: Option<f64>,
    pub beta: f64,
    pub unintended: Vec<usize>,
    pub sae_digest: [u8; 32],
}

impl LogisticClassifier {
    pub fn zeros(dim: usize, beta: f64, purifier: &Purifier) -> Self {
        Self {
            theta: Array1::zeros(dim),
            intercept: None,
            beta,
            unintended: purifier.feature_ids.clone(),
            sae_digest: purifier.sae_digest,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn logit(&self, x_plus: ArrayView1<'_, f64>) -> f64 {
        self.theta.dot(&x_plus) + self.intercept.unwrap_or(0.0)
    }

    pub fn predict(&self, x_plus: ArrayView1<'_, f64>) -> f64 {
        sigmoid(self.logit(x_plus))
    }

    /// Checks that `purifier` holds the unintended set this model was trained
    /// against.
    pub fn check_purifier(&self, purifier: &Purifier) -> Result<()> {
        if purifier.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: purifier.dim(),
            });
        }
        if purifier.sae_digest != self.sae_digest {
            return Err(Error::DigestMismatch {
                expected: hex::encode(self.sae_digest),
                actual: hex::encode(purifier.sae_digest),
            });
        }
        if purifier.feature_ids != self.unintended {
            return Err(Error::InvalidConfig(
                "unintended feature set differs from the one used in training".into(),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.intercept.is_some() {
            return Err(Error::InvalidConfig("CLF1 cannot store an intercept".into()));
        }
        let fmt = |e| Error::format("<clf>", e);
        let mut out = Vec::with_capacity(52 + 4 * (self.unintended.len() + self.dim()));
        out.extend_from_slice(&CLF_MAGIC);
        put_u32(&mut out, CLF_VERSION);
        put_u32(&mut out, dim_u32(self.dim(), "dim").map_err(fmt)?);
        put_f32(&mut out, self.beta as f32);
        put_u32(&mut out, dim_u32(self.unintended.len(), "n_unintended").map_err(fmt)?);
        for &id in &self.unintended {
            put_u32(&mut out, dim_u32(id, "feature id").map_err(fmt)?);
        }
        out.extend_from_slice(&self.sae_digest);
        for &t in &self.theta {
            put_f32(&mut out, t as f32);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        r.magic(CLF_MAGIC)?;
        let version = r.u32()?;
        if version != CLF_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(FormatError::InvalidHeader("dim is 0".into()));
        }
        let beta = r.f32()?;
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(FormatError::InvalidHeader(format!("beta {beta}")));
        }
        let n = r.u32()? as usize;
        if n.saturating_mul(4) > r.remaining() {
            return Err(FormatError::Truncated {
                expected: (bytes.len() - r.remaining()) as u64 + 4 * n as u64,
                actual: bytes.len() as u64,
            });
        }
        let mut unintended = Vec::with_capacity(n);
        for _ in 0..n {
            unintended.push(r.u32()? as usize);
        }
        if unintended.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FormatError::InvalidHeader("feature ids not sorted and unique".into()));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let theta = r.f32_payload(dim)?;
        Ok(Self {
            theta: theta.into_iter().map(f64::from).collect(),
            intercept: None,
            beta: f64::from(beta),
            unintended,
            sae_digest: digest,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(path, e))
    }

    /// Rounds parameters to what CLF1 stores.
    fn round_to_storage(&mut self) {
        self.theta.mapv_inplace(|t| t as f32 as f64);
        self.beta = self.beta as f32 as f64;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClfLoss {
    pub loss: f64,
    /// `beta * |theta^T W-|_1`, included in `loss`.
    pub penalty: f64,
    pub grad_theta: Array1<f64>,
    /// Zero unless the classifier has an intercept.
    pub grad_intercept: f64,
}

/// Loss and gradient on already-purified rows.
pub(crate) fn loss_on_purified(
    clf: &LogisticClassifier,
    x_plus: ArrayView2<'_, f64>,
    labels: &[u8],
    w_minus: ArrayView2<'_, f64>,
    class_wts: (f64, f64),
) -> ClfLoss {
    let mut grad = Array1::zeros(clf.dim());
    let mut grad_b = 0.0;
    let mut total = 0.0;
    let mut weight_sum = 0.0;
    for (x, &y) in x_plus.axis_iter(Axis(0)).zip(labels) {
        let w = if y == 1 { class_wts.1 } else { class_wts.0 };
        let z = clf.logit(x);
        let yf = f64::from(y);
        total += w * (softplus(z) - yf * z);
        let r = w * (sigmoid(z) - yf);
        grad.scaled_add(r, &x);
        grad_b += r;
        weight_sum += w;
    }
    let mut loss = 0.0;
    if weight_sum > 0.0 {
        loss = total / weight_sum;
        grad /= weight_sum;
        grad_b /= weight_sum;
    }
    let mut penalty = 0.0;
    if clf.beta > 0.0 && w_minus.ncols() > 0 {
        let a = clf.theta.dot(&w_minus);
        penalty = clf.beta * a.iter().map(|v| v.abs()).sum::<f64>();
        // sign(0) = 0
        let s = a.mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
        grad.scaled_add(clf.beta, &w_minus.dot(&s));
    }
    ClfLoss {
        loss: loss + penalty,
        penalty,
        grad_theta: grad,
        grad_intercept: if clf.intercept.is_some() { grad_b } else { 0.0 },
    }
}

/// Weighted-mean cross-entropy on purified inputs plus the alignment penalty.
/// `class_wts` is `(w_neg, w_pos)`.
pub fn clf_loss(
    clf: &LogisticClassifier,
    batch: ArrayView2<'_, f64>,
    labels: &[Option<u8>],
    w_minus: ArrayView2<'_, f64>,
    class_wts: (f64, f64),
) -> Result<ClfLoss> {
    if batch.nrows() != labels.len() {
        return Err(Error::InvalidDataset(format!(
            "{} rows but {} labels",
            batch.nrows(),
            labels.len()
        )));
    }
    if batch.ncols() != clf.dim() || w_minus.nrows() != clf.dim() {
        return Err(Error::DimensionMismatch {
            expected: clf.dim(),
            actual: if batch.ncols() != clf.dim() { batch.ncols() } else { w_minus.nrows() },
        });
    }
    let labels: Vec<u8> = labels
        .iter()
        .map(|l| l.ok_or(Error::Unlabeled))
        .collect::<Result<_>>()?;
    let x_plus = Purifier::from_matrix(w_minus.to_owned()).purify_batch(batch)?;
    Ok(loss_on_purified(clf, x_plus.view(), &labels, w_minus, class_wts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfTrainConfig {
    pub optimizer: AdamWConfig,
    pub max_epochs: usize,
    pub lr_grid: Vec<f64>,
    pub plateau: PlateauSchedule,
    pub batch_size: usize,
    pub seed: u64,
    pub beta: f64,
    pub fit_intercept: bool,
    /// Stop a grid run once the schedule has no reductions left and the
    /// metric has stalled for another `patience` epochs.
    pub early_stopping: bool,
}

impl Default for ClfTrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            max_epochs: 50,
            lr_grid: vec![1e-2, 1e-3, 1e-4],
            plateau: PlateauSchedule::default(),
            batch_size: 64,
            seed: 0,
            beta: 3.0,
            fit_intercept: false,
            early_stopping: false,
        }
    }
}

impl ClfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.plateau.validate()?;
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::InvalidConfig("lr_grid must be non-empty and positive".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("max_epochs and batch_size must be >= 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta {} must be finite and >= 0", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub f1_positive: f64,
    pub n_eval: usize,
    /// `|theta^T W-|_1` (without beta).
    pub penalty_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfEpochRecord {
    pub grid_lr: f64,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Accuracy and positive-class F1 from predictions.
pub fn binary_metrics(pred: &[bool], labels: &[u8]) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in pred.iter().zip(labels) {
        match (p, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        if p == (y == 1) {
            correct += 1;
        }
    }
    let acc = correct as f64 / labels.len().max(1) as f64;
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (acc, f1)
}

fn predictions(clf: &LogisticClassifier, x_plus: ArrayView2<'_, f64>, threshold: f64) -> Vec<bool> {
    x_plus
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|x| clf.predict(x) >= threshold)
        .collect()
}

/// Purifies `ds` with `purifier` and scores the classifier at `threshold`.
pub fn evaluate(
    clf: &LogisticClassifier,
    ds: &EmbeddingDataset,
    purifier: &Purifier,
    threshold: f64,
) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidConfig(format!("threshold {threshold} outside [0, 1]")));
    }
    clf.check_purifier(purifier)?;
    let labels = ds.require_labels()?;
    let x_plus = purifier.purify_batch(ds.to_matrix::<f64>().view())?;
    let (accuracy, f1_positive) = binary_metrics(&predictions(clf, x_plus.view(), threshold), &labels);
    Ok(EvalReport {
        accuracy,
        f1_positive,
        n_eval: ds.n_rows(),
        penalty_l1: purifier.alignment_l1(clf.theta.view()),
    })
}

pub struct TrainOutcome {
    pub classifier: LogisticClassifier,
    pub val_report: EvalReport,
    pub history: Vec<ClfEpochRecord>,
}

/// Grid search over learning rates; every run starts from `theta = 0` and the
/// checkpoint with the best validation accuracy over all epochs and all runs
/// is returned (earlier wins ties).
pub fn train_classifier(
    train: &EmbeddingDataset,
    val: &EmbeddingDataset,
    purifier: &Purifier,
    cfg: &ClfTrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("train or validation set"));
    }
    for ds in [train, val] {
        if ds.dim() != purifier.dim() {
            return Err(Error::DimensionMismatch {
                expected: purifier.dim(),
                actual: ds.dim(),
            });
        }
    }
    let y_train = train.require_labels()?;
    let y_val = val.require_labels()?;
    let wts = class_weights(&y_train)?;
    let x_train = purifier.purify_batch(train.to_matrix::<f64>().view())?;
    let x_val = purifier.purify_batch(val.to_matrix::<f64>().view())?;
    let w_minus = purifier.w_minus();
    let dim = train.dim();
    let n_params = dim + usize::from(cfg.fit_intercept);

    let mut best: Option<(f64, LogisticClassifier)> = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.n_rows()).collect();

    for &grid_lr in &cfg.lr_grid {
        let mut clf = LogisticClassifier::zeros(dim, cfg.beta, purifier);
        if cfg.fit_intercept {
            clf.intercept = Some(0.0);
        }
        let mut state = AdamWState::<f64>::new(n_params);
        let mut schedule = cfg.plateau.reset();
        let mut lr = grid_lr;
        let mut params = vec![0.0; n_params];
        let mut grads = vec![0.0; n_params];

        for epoch in 0..cfg.max_epochs {
            order.sort_unstable();
            order.shuffle(&mut seeded(cfg.seed, epoch as u64));
            let opt = cfg.optimizer.with_lr(lr);
            let mut epoch_loss = 0.0;
            for idx in order.chunks(cfg.batch_size) {
                let xb = x_train.select(Axis(0), idx);
                let yb: Vec<u8> = idx.iter().map(|&i| y_train[i]).collect();
                let out = loss_on_purified(&clf, xb.view(), &yb, w_minus, wts);
                epoch_loss += out.loss * idx.len() as f64;
                grads[..dim].copy_from_slice(out.grad_theta.as_slice().expect("contiguous"));
                params[..dim].copy_from_slice(clf.theta.as_slice().expect("contiguous"));
                if let Some(b) = clf.intercept {
                    grads[dim] = out.grad_intercept;
                    params[dim] = b;
                }
                state.step(&mut params, &grads, &opt)?;
                clf.theta.as_slice_mut().expect("contiguous").copy_from_slice(&params[..dim]);
                if clf.intercept.is_some() {
                    clf.intercept = Some(params[dim]);
                }
            }
            let (val_acc, _) = binary_metrics(&predictions(&clf, x_val.view(), 0.5), &y_val);
            let rec = ClfEpochRecord {
                grid_lr,
                epoch: epoch + 1,
                lr,
                train_loss: epoch_loss / train.n_rows() as f64,
                val_accuracy: val_acc,
            };
            debug!(?rec, "classifier epoch");
            history.push(rec);
            if best.as_ref().is_none_or(|(b, _)| val_acc > *b) {
                best = Some((val_acc, clf.clone()));
            }
            let (new_lr, _) = schedule.update(val_acc, lr);
            lr = new_lr;
            if cfg.early_stopping
                && schedule.reductions_done == schedule.max_reductions
                && schedule.epochs_since_best >= schedule.patience
            {
                break;
            }
        }
    }

    let (_, mut classifier) = best.expect("at least one epoch ran");
    classifier.round_to_storage();
    let (accuracy, f1_positive) = binary_metrics(&predictions(&classifier, x_val.view(), 0.5), &y_val);
    let val_report = EvalReport {
        accuracy,
        f1_positive,
        n_eval: val.n_rows(),
        penalty_l1: purifier.alignment_l1(classifier.theta.view()),
    };
    Ok(TrainOutcome {
        classifier,
        val_report,
        history,
    })
}
