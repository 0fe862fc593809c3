//! Reconstruction and residual objectives with analytic gradients.
//!
//! Gradients are taken with the Top-K support held fixed (the selection is
//! treated as a constant mask), which is exact wherever the support is stable
//! under small perturbations of `W`.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::model::{top_k_positive, TopKSae};
use crate::error::{Error, Result};
use crate::real::Real;

/// Norm applied to the reconstruction error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionNorm {
    /// `||x - h(x)||^2`
    #[default]
    Squared,
    /// `||x - h(x)||`
    Euclidean,
}

/// Per-feature dead flags; a dead feature never survives Top-K on a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeadMask {
    pub is_dead: Vec<bool>,
    pub n_dead: usize,
}

impl DeadMask {
    pub fn from_flags(is_dead: Vec<bool>) -> Self {
        let n_dead = is_dead.iter().filter(|&&d| d).count();
        Self { is_dead, n_dead }
    }

    pub fn none(n_features: usize) -> Self {
        Self::from_flags(vec![false; n_features])
    }

    pub fn dead_ids(&self) -> Vec<usize> {
        self.is_dead
            .iter()
            .enumerate()
            .filter_map(|(c, &d)| d.then_some(c))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LossAndGrad<F> {
    pub loss: f64,
    /// Gradient in the SAE's feature-major layout (`n_features x dim`).
    pub grad: Array2<F>,
}

fn dot<F: Real>(a: &[F], b: ArrayView1<'_, F>) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Loss of one error vector and `dL/de`.
fn error_loss<F: Real>(err: &[F], norm: ReconstructionNorm) -> (F, Vec<F>) {
    let sq: F = err.iter().map(|&e| e * e).sum();
    match norm {
        ReconstructionNorm::Squared => {
            let two = F::from_f64(2.0);
            (sq, err.iter().map(|&e| two * e).collect())
        }
        ReconstructionNorm::Euclidean => {
            let n = sq.sqrt();
            if n > F::zero() {
                (n, err.iter().map(|&e| e / n).collect())
            } else {
                (n, vec![F::zero(); err.len()])
            }
        }
    }
}

/// Adds `scale * dL/dw_c` for every feature in `support`, where `w_c` is used
/// both to encode (`a_c = x . w_c`) and to decode (`sum a_c w_c`).
fn accumulate_tied<F: Real>(
    sae: &TopKSae<F>,
    x: ArrayView1<'_, F>,
    support: impl Iterator<Item = (usize, F)>,
    upstream: &[F],
    l1: F,
    scale: F,
    grad: &mut Array2<F>,
) {
    for (c, a_c) in support {
        let enc = (dot(upstream, sae.feature(c)) + l1) * scale;
        let dec = a_c * scale;
        let mut g = grad.row_mut(c);
        for ((g_d, &u), &x_d) in g.iter_mut().zip(upstream).zip(x) {
            *g_d += dec * u + enc * x_d;
        }
    }
}

/// Sum over rows of the SAE loss; adds `scale * gradient` into `grad`.
pub(crate) fn accumulate_sae_loss<F: Real>(
    sae: &TopKSae<F>,
    batch: ArrayView2<'_, F>,
    preacts: ArrayView2<'_, F>,
    norm: ReconstructionNorm,
    scale: F,
    grad: &mut Array2<F>,
) -> f64 {
    let lambda = sae.l1_weight();
    let mut total = 0.0;
    for (x, p) in batch.axis_iter(Axis(0)).zip(preacts.axis_iter(Axis(0))) {
        let a = top_k_positive(p, sae.k_active(), |_| true);
        let mut err: Vec<F> = x.iter().map(|&v| -v).collect();
        for (c, v) in a.iter() {
            for (e, &w) in err.iter_mut().zip(sae.feature(c)) {
                *e += v * w;
            }
        }
        let (l, upstream) = error_loss(&err, norm);
        total += (l + lambda * a.l1()).as_f64();
        accumulate_tied(sae, x, a.iter(), &upstream, lambda, scale, grad);
    }
    total
}

/// Sum over rows of the residual loss; adds `scale * gradient` into `grad`
/// (touching dead-feature rows only).
pub(crate) fn accumulate_residual_loss<F: Real>(
    sae: &TopKSae<F>,
    mask: &DeadMask,
    dead_k: usize,
    batch: ArrayView2<'_, F>,
    preacts: ArrayView2<'_, F>,
    norm: ReconstructionNorm,
    scale: F,
    grad: &mut Array2<F>,
) -> f64 {
    if mask.n_dead == 0 || dead_k == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (x, p) in batch.axis_iter(Axis(0)).zip(preacts.axis_iter(Axis(0))) {
        // r = x - h(x), held constant
        let a = top_k_positive(p, sae.k_active(), |_| true);
        let mut err: Vec<F> = x.iter().map(|&v| -v).collect();
        for (c, v) in a.iter() {
            for (e, &w) in err.iter_mut().zip(sae.feature(c)) {
                *e += v * w;
            }
        }
        // err currently holds h(x) - x = -r; add the dead reconstruction
        let dead = top_k_positive(p, dead_k, |c| mask.is_dead[c]);
        for (c, v) in dead.iter() {
            for (e, &w) in err.iter_mut().zip(sae.feature(c)) {
                *e += v * w;
            }
        }
        let (l, upstream) = error_loss(&err, norm);
        total += l.as_f64();
        accumulate_tied(sae, x, dead.iter(), &upstream, F::zero(), scale, grad);
    }
    total
}

fn check_batch<F: Real>(sae: &TopKSae<F>, batch: ArrayView2<'_, F>) -> Result<()> {
    if batch.nrows() == 0 {
        return Err(Error::Empty("batch"));
    }
    sae.check_dim(batch.ncols())
}

/// Mean over the batch of `||x - h(x)||^2 + lambda * ||a||_1` and its gradient.
pub fn sae_loss<F: Real>(
    sae: &TopKSae<F>,
    batch: ArrayView2<'_, F>,
    norm: ReconstructionNorm,
) -> Result<LossAndGrad<F>> {
    check_batch(sae, batch)?;
    let preacts = sae.preacts(batch);
    let mut grad = Array2::zeros(sae.features().raw_dim());
    let b = batch.nrows();
    let scale = F::one() / F::from_f64(b as f64);
    let total = accumulate_sae_loss(sae, batch, preacts.view(), norm, scale, &mut grad);
    Ok(LossAndGrad {
        loss: total / b as f64,
        grad,
    })
}

/// Mean residual loss: dead features (Top-`dead_k` among them) fit the
/// stop-gradient residual `x - h(x)`.
pub fn residual_loss<F: Real>(
    sae: &TopKSae<F>,
    mask: &DeadMask,
    dead_k: usize,
    batch: ArrayView2<'_, F>,
    norm: ReconstructionNorm,
) -> Result<LossAndGrad<F>> {
    check_batch(sae, batch)?;
    if mask.is_dead.len() != sae.n_features() {
        return Err(Error::DimensionMismatch {
            expected: sae.n_features(),
            actual: mask.is_dead.len(),
        });
    }
    let mut grad = Array2::zeros(sae.features().raw_dim());
    if mask.n_dead == 0 {
        return Ok(LossAndGrad { loss: 0.0, grad });
    }
    let preacts = sae.preacts(batch);
    let b = batch.nrows();
    let scale = F::one() / F::from_f64(b as f64);
    let total =
        accumulate_residual_loss(sae, mask, dead_k, batch, preacts.view(), norm, scale, &mut grad);
    Ok(LossAndGrad {
        loss: total / b as f64,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn hand_computed_loss() {
        let sae = TopKSae::new(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], 1, 0.0).unwrap();
        let out = sae_loss(&sae, array![[2.0, -1.0]].view(), ReconstructionNorm::Squared).unwrap();
        assert_eq!(out.loss, 1.0);
        let out = sae_loss(&sae, array![[2.0, -1.0]].view(), ReconstructionNorm::Euclidean).unwrap();
        assert_eq!(out.loss, 1.0);
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let w = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let sae = TopKSae::new(w, 2, 0.0).unwrap();
        let out = sae_loss(&sae, array![[2.0, 3.0], [0.5, 0.0]].view(), ReconstructionNorm::Squared).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn empty_batch_rejected() {
        let sae = TopKSae::<f64>::init_kaiming(2, 3, 1, 0).unwrap();
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(sae_loss(&sae, empty.view(), ReconstructionNorm::Squared), Err(Error::Empty(_))));
    }

    #[test]
    fn residual_with_no_dead_features_is_zero() {
        let sae = TopKSae::<f64>::init_kaiming(3, 6, 2, 4).unwrap();
        let batch = array![[1.0, 2.0, 3.0]];
        let out = residual_loss(&sae, &DeadMask::none(6), 2, batch.view(), ReconstructionNorm::Squared).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn aligned_dead_feature_fits_residual_exactly() {
        // Feature 0 reconstructs the first axis; feature 1 is dead and points
        // along the residual r = (0, 2) with activation x . w_1 = |r| = 2.
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let sae = TopKSae::new(w, 1, 0.0).unwrap();
        let x = array![[3.0, 2.0]];
        let mask = DeadMask::from_flags(vec![false, true]);
        let out = residual_loss(&sae, &mask, 1, x.view(), ReconstructionNorm::Squared).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn residual_gradient_only_touches_dead_rows() {
        let mut rng = seeded(9, 0);
        for _ in 0..50 {
            let sae = TopKSae::<f64>::init_kaiming(6, 12, 3, rng.random()).unwrap();
            let batch = Array2::from_shape_simple_fn((5, 6), || rng.random_range(-1.0..1.0));
            let flags: Vec<bool> = (0..12).map(|_| rng.random_bool(0.5)).collect();
            let mask = DeadMask::from_flags(flags.clone());
            let out = residual_loss(&sae, &mask, 2, batch.view(), ReconstructionNorm::Squared).unwrap();
            for (c, dead) in flags.iter().enumerate() {
                if !dead {
                    assert!(out.grad.row(c).iter().all(|&g| g == 0.0));
                }
            }
        }
    }
}
