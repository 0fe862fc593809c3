use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::codec::{dim_u32, put_f32, put_u32, ByteReader};
use crate::error::{Error, FormatError, Result};
use crate::real::Real;
use crate::rng::seeded;

pub const SAE_MAGIC: [u8; 4] = *b"SAE1";
pub const SAE_VERSION: u32 = 1;

/// Tied-weight Top-K sparse autoencoder `h(x) = TopK(ReLU(x W)) W^T`.
///
/// `W` is `dim x n_features`. It is held feature-major (`n_features x dim`,
/// one contiguous row per learned feature vector); [`TopKSae::weights`]
/// exposes the `dim x n_features` view.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKSae<F: Real = f32> {
    features: Array2<F>,
    k_active: usize,
    l1_weight: F,
}

/// Sparse post-Top-K activation of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseActivation<F> {
    /// Strictly increasing feature ids.
    pub indices: Vec<usize>,
    /// Positive activations matching `indices`.
    pub values: Vec<F>,
    pub n_features: usize,
}

impl<F: Real> SparseActivation<F> {
    pub fn empty(n_features: usize) -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
            n_features,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn get(&self, feature: usize) -> Option<F> {
        self.indices
            .binary_search(&feature)
            .ok()
            .map(|i| self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, F)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn l1(&self) -> F {
        self.values.iter().copied().sum()
    }
}

/// Positive entries of `preacts` admitted by `keep`, reduced to the `k`
/// largest (ties toward the lower index), returned in index order.
pub(crate) fn top_k_positive<F: Real>(
    preacts: ArrayView1<'_, F>,
    k: usize,
    keep: impl Fn(usize) -> bool,
) -> SparseActivation<F> {
    let n_features = preacts.len();
    let mut cand: Vec<(usize, F)> = preacts
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > F::zero() && keep(c))
        .map(|(c, &v)| (c, v))
        .collect();
    if k == 0 {
        cand.clear();
    } else if cand.len() > k {
        let by_rank = |a: &(usize, F), b: &(usize, F)| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        };
        cand.select_nth_unstable_by(k - 1, by_rank);
        cand.truncate(k);
    }
    cand.sort_unstable_by_key(|&(c, _)| c);
    let (indices, values) = cand.into_iter().unzip();
    SparseActivation {
        indices,
        values,
        n_features,
    }
}

impl<F: Real> TopKSae<F> {
    /// Builds an SAE from a `dim x n_features` weight matrix.
    pub fn new(weights: Array2<F>, k_active: usize, l1_weight: F) -> Result<Self> {
        let features = weights.t().as_standard_layout().into_owned();
        Self::from_features(features, k_active, l1_weight)
    }

    /// Builds an SAE from an `n_features x dim` matrix of feature vectors.
    pub fn from_features(features: Array2<F>, k_active: usize, l1_weight: F) -> Result<Self> {
        let (c, d) = features.dim();
        if d == 0 {
            return Err(Error::InvalidConfig("SAE dim must be at least 1".into()));
        }
        if c < d {
            return Err(Error::InvalidConfig(format!(
                "n_features {c} must be at least dim {d}"
            )));
        }
        if k_active == 0 || k_active > c {
            return Err(Error::InvalidConfig(format!(
                "k_active {k_active} must lie in 1..={c}"
            )));
        }
        if !(l1_weight >= F::zero()) {
            return Err(Error::InvalidConfig("l1_weight must be non-negative".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("SAE weights must be finite".into()));
        }
        Ok(Self {
            features: features.as_standard_layout().into_owned(),
            k_active,
            l1_weight,
        })
    }

    /// Kaiming-normal initialisation: i.i.d. `N(0, 2 / dim)` entries.
    pub fn init_kaiming(dim: usize, n_features: usize, k_active: usize, seed: u64) -> Result<Self> {
        if dim == 0 || n_features < dim {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= dim <= n_features, got dim {dim}, n_features {n_features}"
            )));
        }
        let normal = Normal::new(0.0, (2.0 / dim as f64).sqrt()).expect("positive std");
        let mut rng = seeded(seed, 0);
        // Drawn in W's row-major order so the stream matches the file layout.
        let w = Array2::from_shape_simple_fn((dim, n_features), || {
            F::from_f64(normal.sample(&mut rng))
        });
        Self::new(w, k_active, F::zero())
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_features(&self) -> usize {
        self.features.nrows()
    }

    pub fn k_active(&self) -> usize {
        self.k_active
    }

    pub fn l1_weight(&self) -> F {
        self.l1_weight
    }

    pub fn set_l1_weight(&mut self, l1: F) {
        self.l1_weight = l1;
    }

    pub fn set_k_active(&mut self, k: usize) -> Result<()> {
        if k == 0 || k > self.n_features() {
            return Err(Error::InvalidConfig(format!("k_active {k} out of range")));
        }
        self.k_active = k;
        Ok(())
    }

    /// `W` as a `dim x n_features` view.
    pub fn weights(&self) -> ArrayView2<'_, F> {
        self.features.t()
    }

    /// Feature-major weights, one row per feature vector.
    pub fn features(&self) -> &Array2<F> {
        &self.features
    }

    pub(crate) fn features_mut(&mut self) -> &mut Array2<F> {
        &mut self.features
    }

    pub fn feature(&self, c: usize) -> ArrayView1<'_, F> {
        self.features.row(c)
    }

    /// Columns of `W` at `ids` as a `dim x ids.len()` matrix in f64.
    pub fn columns_f64(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.dim(), ids.len()));
        for (j, &c) in ids.iter().enumerate() {
            if c >= self.n_features() {
                return Err(Error::IndexOutOfRange {
                    index: c,
                    len: self.n_features(),
                });
            }
            for (d, &v) in self.features.row(c).iter().enumerate() {
                out[[d, j]] = v.as_f64();
            }
        }
        Ok(out)
    }

    /// Pre-activations `x W` for a batch of rows, `batch x n_features`.
    pub fn preacts(&self, batch: ArrayView2<'_, F>) -> Array2<F> {
        batch.dot(&self.features.t())
    }

    pub fn encode(&self, x: &[F]) -> Result<SparseActivation<F>> {
        self.check_dim(x.len())?;
        // Same kernel as the batch path so single-row results match exactly.
        let row = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        let p = self.preacts(row);
        Ok(top_k_positive(p.row(0), self.k_active, |_| true))
    }

    /// Encodes every row of `batch`.
    pub fn encode_batch(&self, batch: ArrayView2<'_, F>) -> Result<Vec<SparseActivation<F>>> {
        self.check_dim(batch.ncols())?;
        let p = self.preacts(batch);
        Ok(p.axis_iter(Axis(0))
            .map(|row| top_k_positive(row, self.k_active, |_| true))
            .collect())
    }

    pub fn decode(&self, a: &SparseActivation<F>) -> Result<Vec<F>> {
        if a.n_features != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                actual: a.n_features,
            });
        }
        let mut out = vec![F::zero(); self.dim()];
        for (c, v) in a.iter() {
            if c >= self.n_features() {
                return Err(Error::IndexOutOfRange {
                    index: c,
                    len: self.n_features(),
                });
            }
            for (o, &w) in out.iter_mut().zip(self.features.row(c)) {
                *o += v * w;
            }
        }
        Ok(out)
    }

    pub fn reconstruct(&self, x: &[F]) -> Result<Vec<F>> {
        self.decode(&self.encode(x)?)
    }

    pub(crate) fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: d,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header_err = |e: FormatError| Error::InvalidConfig(e.to_string());
        let (c, d) = self.features.dim();
        let mut out = Vec::with_capacity(24 + 4 * c * d);
        out.extend_from_slice(&SAE_MAGIC);
        put_u32(&mut out, SAE_VERSION);
        put_u32(&mut out, dim_u32(d, "dim").map_err(header_err)?);
        put_u32(&mut out, dim_u32(c, "n_features").map_err(header_err)?);
        put_u32(&mut out, dim_u32(self.k_active, "k_active").map_err(header_err)?);
        put_f32(&mut out, self.l1_weight.as_f32());
        for row in 0..d {
            for col in 0..c {
                put_f32(&mut out, self.features[[col, row]].as_f32());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        r.magic(SAE_MAGIC)?;
        let version = r.u32()?;
        if version != SAE_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let dim = r.u32()? as usize;
        let n_features = r.u32()? as usize;
        let k_active = r.u32()? as usize;
        let l1 = r.f32()?;
        let count = dim.checked_mul(n_features).ok_or(FormatError::SizeOverflow)?;
        let values = r.f32_payload(count)?;
        let w = Array2::from_shape_vec((dim, n_features), values.into_iter().map(F::from_f32).collect())
            .map_err(|e| FormatError::InvalidHeader(e.to_string()))?;
        TopKSae::new(w, k_active, F::from_f32(l1))
            .map_err(|e| FormatError::InvalidHeader(e.to_string()))
    }

    /// SHA-256 of the SAE1 encoding.
    pub fn digest(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_bytes()?).into())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(path, e))
    }

    /// Converts to another scalar type (e.g. f32 model into f64 for checks).
    pub fn cast<G: Real>(&self) -> TopKSae<G> {
        TopKSae {
            features: self.features.mapv(|v| G::from_f64(v.as_f64())),
            k_active: self.k_active,
            l1_weight: G::from_f64(self.l1_weight.as_f64()),
        }
    }
}
