use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use super::loss::{accumulate_residual_loss, accumulate_sae_loss, DeadMask, ReconstructionNorm};
use super::model::{top_k_positive, TopKSae};
use crate::embedding::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, AdamWState};
use crate::real::Real;
use crate::rng::seeded;

/// Rows per parallel chunk for inference passes.
const CHUNK_ROWS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the residual loss during fine-tuning.
    pub alpha: f64,
    /// Number of dead features allowed to fit each residual.
    pub dead_k: usize,
    pub seed: u64,
    pub norm: ReconstructionNorm,
    /// Rescale every feature vector to unit norm after each step.
    pub normalize_features: bool,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl SaeTrainConfig {
    /// lr 1e-3, batch 512, 5 epochs, constant schedule.
    pub fn pretrain() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            batch_size: 512,
            epochs: 5,
            alpha: 0.0,
            dead_k: 20,
            seed: 0,
            norm: ReconstructionNorm::Squared,
            normalize_features: false,
        }
    }

    /// lr 5e-5, batch 512, 5 epochs, alpha 0.1, 20 dead features per residual.
    pub fn finetune() -> Self {
        Self {
            optimizer: AdamWConfig {
                learning_rate: 5e-5,
                epsilon: crate::optim::FINETUNE_EPSILON,
                ..AdamWConfig::default()
            },
            alpha: 0.1,
            ..Self::pretrain()
        }
    }

    /// Settings for small task datasets: 40 epochs, batch 8, lr 3e-6.
    pub fn finetune_small() -> Self {
        let mut cfg = Self::finetune();
        cfg.epochs = 40;
        cfg.batch_size = 8;
        cfg.optimizer.learning_rate = 3e-6;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be >= 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidConfig("alpha must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Dead features on the training set at the start of the epoch.
    pub n_dead: Option<usize>,
    pub val_nmse: Option<f64>,
}

fn check_ds<F: Real>(sae: &TopKSae<F>, ds: &EmbeddingDataset) -> Result<()> {
    sae.check_dim(ds.dim())
}

fn chunks<F: Real>(x: &Array2<F>) -> Vec<ArrayView2<'_, F>> {
    x.axis_chunks_iter(Axis(0), CHUNK_ROWS).collect()
}

/// Marks every feature that never survives Top-K on any row of `ds`.
pub fn detect_dead_features<F: Real>(sae: &TopKSae<F>, ds: &EmbeddingDataset) -> Result<DeadMask> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    check_ds(sae, ds)?;
    let x = ds.to_matrix::<F>();
    let c = sae.n_features();
    let alive = chunks(&x)
        .into_par_iter()
        .map(|chunk| {
            let mut alive = vec![false; c];
            let p = sae.preacts(chunk);
            for row in p.axis_iter(Axis(0)) {
                for &j in &top_k_positive(row, sae.k_active(), |_| true).indices {
                    alive[j] = true;
                }
            }
            alive
        })
        .reduce(
            || vec![false; c],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x |= y);
                a
            },
        );
    Ok(DeadMask::from_flags(alive.into_iter().map(|a| !a).collect()))
}

/// Squared reconstruction error summed over rows, normalised by the squared
/// error of predicting the dataset mean.
pub fn nmse<F: Real>(sae: &TopKSae<F>, ds: &EmbeddingDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    check_ds(sae, ds)?;
    let d = ds.dim();
    let mut mean = vec![0.0f64; d];
    for row in ds.rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    let n = ds.n_rows() as f64;
    mean.iter_mut().for_each(|m| *m /= n);

    let x = ds.to_matrix::<F>();
    let partial: Vec<(f64, f64)> = chunks(&x)
        .into_par_iter()
        .map(|chunk| {
            let p = sae.preacts(chunk);
            let mut num = 0.0;
            let mut den = 0.0;
            for (row, pre) in chunk.axis_iter(Axis(0)).zip(p.axis_iter(Axis(0))) {
                let a = top_k_positive(pre, sae.k_active(), |_| true);
                let mut recon = vec![F::zero(); d];
                for (c, v) in a.iter() {
                    for (r, &w) in recon.iter_mut().zip(sae.feature(c)) {
                        *r += v * w;
                    }
                }
                for j in 0..d {
                    let xv = row[j].as_f64();
                    num += (xv - recon[j].as_f64()).powi(2);
                    den += (xv - mean[j]).powi(2);
                }
            }
            (num, den)
        })
        .collect();
    let (num, den) = partial
        .into_iter()
        .fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    if den == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(num / den)
}

/// Mean SAE loss over a dataset, without gradients.
pub fn dataset_loss<F: Real>(sae: &TopKSae<F>, ds: &EmbeddingDataset, norm: ReconstructionNorm) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    check_ds(sae, ds)?;
    let x = ds.to_matrix::<F>();
    let lambda = sae.l1_weight();
    let total: f64 = chunks(&x)
        .into_par_iter()
        .map(|chunk| {
            let p = sae.preacts(chunk);
            let mut total = 0.0;
            for (row, pre) in chunk.axis_iter(Axis(0)).zip(p.axis_iter(Axis(0))) {
                let a = top_k_positive(pre, sae.k_active(), |_| true);
                let mut err: Vec<F> = row.iter().map(|&v| -v).collect();
                for (c, v) in a.iter() {
                    for (e, &w) in err.iter_mut().zip(sae.feature(c)) {
                        *e += v * w;
                    }
                }
                let sq: F = err.iter().map(|&e| e * e).sum();
                let l = match norm {
                    ReconstructionNorm::Squared => sq,
                    ReconstructionNorm::Euclidean => sq.sqrt(),
                };
                total += (l + lambda * a.l1()).as_f64();
            }
            total
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    Ok(total / ds.n_rows() as f64)
}

fn normalize_rows<F: Real>(w: &mut Array2<F>) {
    for mut row in w.axis_iter_mut(Axis(0)) {
        let n = row.iter().map(|&v| v * v).sum::<F>().sqrt();
        if n > F::zero() {
            row.mapv_inplace(|v| v / n);
        }
    }
}

/// Shared mini-batch loop. `residual` enables the fine-tuning objective.
fn train_loop<F: Real>(
    mut sae: TopKSae<F>,
    train: &EmbeddingDataset,
    val: &EmbeddingDataset,
    cfg: &SaeTrainConfig,
    residual: bool,
) -> Result<(TopKSae<F>, Vec<EpochRecord>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    check_ds(&sae, train)?;
    check_ds(&sae, val)?;

    let x = train.to_matrix::<F>();
    let n = train.n_rows();
    let mut state = AdamWState::<F>::new(sae.features().len());
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let alpha = F::from_f64(cfg.alpha);

    for epoch in 0..cfg.epochs {
        let mask = if residual {
            Some(detect_dead_features(&sae, train)?)
        } else {
            None
        };
        order.sort_unstable();
        order.shuffle(&mut seeded(cfg.seed, epoch as u64));

        let mut epoch_total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = x.select(Axis(0), idx);
            let b = idx.len();
            let scale = F::one() / F::from_f64(b as f64);
            let preacts = sae.preacts(batch.view());
            let mut grad = Array2::zeros(sae.features().raw_dim());
            let mut batch_total =
                accumulate_sae_loss(&sae, batch.view(), preacts.view(), cfg.norm, scale, &mut grad);
            if let Some(mask) = &mask {
                if cfg.alpha > 0.0 && mask.n_dead > 0 {
                    let res = accumulate_residual_loss(
                        &sae,
                        mask,
                        cfg.dead_k,
                        batch.view(),
                        preacts.view(),
                        cfg.norm,
                        alpha * scale,
                        &mut grad,
                    );
                    batch_total += cfg.alpha * res;
                }
            }
            epoch_total += batch_total;

            let params = sae
                .features_mut()
                .as_slice_mut()
                .expect("standard layout");
            state.step(params, grad.as_slice().expect("standard layout"), &cfg.optimizer)?;
            if cfg.normalize_features {
                normalize_rows(sae.features_mut());
            }
        }

        let val_loss = if val.is_empty() {
            None
        } else {
            Some(dataset_loss(&sae, val, cfg.norm)?)
        };
        let val_nmse = if residual && !val.is_empty() {
            nmse(&sae, val).ok()
        } else {
            None
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_total / n as f64,
            val_loss,
            n_dead: mask.as_ref().map(|m| m.n_dead),
            val_nmse,
        };
        debug!(?rec, "sae epoch");
        history.push(rec);
    }
    Ok((sae, history))
}

/// Minimises the SAE loss with a constant learning rate.
pub fn pretrain<F: Real>(
    sae: TopKSae<F>,
    train: &EmbeddingDataset,
    val: &EmbeddingDataset,
    cfg: &SaeTrainConfig,
) -> Result<(TopKSae<F>, Vec<EpochRecord>)> {
    train_loop(sae, train, val, cfg, false)
}

/// Minimises `L_SAE + alpha * L_residual`, recomputing the dead mask over
/// the full training set at the start of every epoch.
pub fn finetune<F: Real>(
    sae: TopKSae<F>,
    train: &EmbeddingDataset,
    val: &EmbeddingDataset,
    cfg: &SaeTrainConfig,
) -> Result<(TopKSae<F>, Vec<EpochRecord>)> {
    train_loop(sae, train, val, cfg, true)
}
