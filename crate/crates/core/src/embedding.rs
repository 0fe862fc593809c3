//! Embedding datasets: the EMB1 binary format, its JSONL sidecar, stratified
//! splitting and class weights.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EMB1"
//! 4       4     version (u32 LE) = 1
//! 8       8     n_rows (u64 LE)
//! 16      4     dim (u32 LE)
//! 20      4     dtype (u32 LE), 0 = f32 LE
//! 24      ..    n_rows * dim f32 LE values, row-major
//! ```
//!
//! Per-row span metadata and labels live in `<path>.meta.jsonl`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{dim_u32, put_f32, put_u32, put_u64, ByteReader};
use crate::error::{Error, FormatError, Result};
use crate::real::Real;
use crate::rng::seeded;

pub const EMB_MAGIC: [u8; 4] = *b"EMB1";
pub const EMB_VERSION: u32 = 1;
pub const EMB_HEADER_LEN: usize = 24;
const DTYPE_F32: u32 = 0;

/// Surface text of the span whose hidden state produced a row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanMeta {
    pub row_id: u64,
    pub doc_id: String,
    pub text: String,
    pub token_count: u32,
}

impl SpanMeta {
    pub fn new(row_id: u64, doc_id: impl Into<String>, text: impl Into<String>, token_count: u32) -> Self {
        Self {
            row_id,
            doc_id: doc_id.into(),
            text: text.into(),
            token_count,
        }
    }

    /// Rows with no tokens are synthetic filler and never appear in explanations.
    pub fn is_explainable(&self) -> bool {
        self.token_count > 0
    }
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    row_id: u64,
    doc_id: String,
    text: String,
    token_count: u32,
    label: Option<u8>,
}

/// `n_rows` embeddings of dimension `dim`, stored row-major as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    vectors: Vec<f32>,
    labels: Vec<Option<u8>>,
    meta: Vec<SpanMeta>,
}

impl EmbeddingDataset {
    pub fn new(
        dim: usize,
        vectors: Vec<f32>,
        labels: Vec<Option<u8>>,
        meta: Vec<SpanMeta>,
    ) -> Result<Self> {
        let ds = Self {
            dim,
            vectors,
            labels,
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Unlabeled dataset with generated metadata (`row_id` = row index).
    pub fn unlabeled(dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDataset("dim must be at least 1".into()));
        }
        let n = vectors.len() / dim;
        let meta = (0..n)
            .map(|i| SpanMeta::new(i as u64, "synthetic", format!("row {i}"), 1))
            .collect();
        Self::new(dim, vectors, vec![None; n], meta)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidDataset("dim must be at least 1".into()));
        }
        let n = self.meta.len();
        if self.vectors.len() != n * self.dim {
            return Err(Error::InvalidDataset(format!(
                "{} values do not fill {n} rows of dim {}",
                self.vectors.len(),
                self.dim
            )));
        }
        if self.labels.len() != n {
            return Err(Error::InvalidDataset(format!(
                "{} labels for {n} rows",
                self.labels.len()
            )));
        }
        if let Some(i) = self.vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "non-finite value in row {} column {}",
                i / self.dim,
                i % self.dim
            )));
        }
        if let Some(l) = self.labels.iter().flatten().find(|&&l| l > 1) {
            return Err(Error::InvalidDataset(format!("label {l} is not 0 or 1")));
        }
        let mut seen = HashSet::with_capacity(n);
        for m in &self.meta {
            if !seen.insert(m.row_id) {
                return Err(Error::InvalidDataset(format!("duplicate row_id {}", m.row_id)));
            }
            if m.token_count > 0 && m.text.is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "row {} has {} tokens but empty text",
                    m.row_id, m.token_count
                )));
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.meta.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.vectors.chunks_exact(self.dim)
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    /// Mutable access to the payload. Finiteness is re-checked on write.
    pub fn vectors_mut(&mut self) -> &mut [f32] {
        &mut self.vectors
    }

    pub fn labels(&self) -> &[Option<u8>] {
        &self.labels
    }

    pub fn meta(&self) -> &[SpanMeta] {
        &self.meta
    }

    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty() && self.labels.iter().all(Option::is_some)
    }

    /// All labels, or [`Error::Unlabeled`] if any row lacks one.
    pub fn require_labels(&self) -> Result<Vec<u8>> {
        self.labels
            .iter()
            .map(|l| l.ok_or(Error::Unlabeled))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut vectors = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            vectors.extend_from_slice(self.row(i));
        }
        Self {
            dim: self.dim,
            vectors,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            meta: indices.iter().map(|&i| self.meta[i].clone()).collect(),
        }
    }

    /// Copies the payload into an `n_rows x dim` matrix of `F`.
    pub fn to_matrix<F: Real>(&self) -> Array2<F> {
        Array2::from_shape_fn((self.n_rows(), self.dim), |(i, j)| {
            F::from_f32(self.vectors[i * self.dim + j])
        })
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

pub fn encode_emb1(ds: &EmbeddingDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let dim = dim_u32(ds.dim, "dim").map_err(|e| Error::InvalidDataset(e.to_string()))?;
    let mut out = Vec::with_capacity(EMB_HEADER_LEN + ds.vectors.len() * 4);
    out.extend_from_slice(&EMB_MAGIC);
    put_u32(&mut out, EMB_VERSION);
    put_u64(&mut out, ds.n_rows() as u64);
    put_u32(&mut out, dim);
    put_u32(&mut out, DTYPE_F32);
    for &v in &ds.vectors {
        put_f32(&mut out, v);
    }
    Ok(out)
}

/// Decodes an EMB1 payload. Returns `(dim, values)`; row count is
/// `values.len() / dim`.
pub fn decode_emb1(bytes: &[u8]) -> Result<(usize, Vec<f32>), FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(EMB_MAGIC)?;
    let version = r.u32()?;
    if version != EMB_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let n_rows = r.u64()?;
    let dim = r.u32()?;
    let dtype = r.u32()?;
    if dtype != DTYPE_F32 {
        return Err(FormatError::UnsupportedDtype(dtype));
    }
    if dim == 0 {
        return Err(FormatError::InvalidHeader("dim is 0".into()));
    }
    let count = usize::try_from(n_rows)
        .ok()
        .and_then(|n| n.checked_mul(dim as usize))
        .ok_or(FormatError::SizeOverflow)?;
    let values = r.f32_payload(count)?;
    Ok((dim as usize, values))
}

pub fn write_embeddings(ds: &EmbeddingDataset, path: &Path) -> Result<()> {
    let bytes = encode_emb1(ds)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;

    let mpath = meta_path(path);
    let file = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut w = BufWriter::new(file);
    for (m, label) in ds.meta.iter().zip(&ds.labels) {
        let line = MetaLine {
            row_id: m.row_id,
            doc_id: m.doc_id.clone(),
            text: m.text.clone(),
            token_count: m.token_count,
            label: *label,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(&mpath, e))?;
    }
    w.flush().map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dim, vectors) = decode_emb1(&bytes).map_err(|e| Error::format(path, e))?;
    let n_rows = vectors.len() / dim;

    let mpath = meta_path(path);
    let file = fs::File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let (labels, meta) = parse_meta(BufReader::new(file)).map_err(|e| match e {
        MetaReadError::Io(e) => Error::io(&mpath, e),
        MetaReadError::Format(e) => Error::format(&mpath, e),
    })?;
    if meta.len() != n_rows {
        return Err(Error::format(
            &mpath,
            FormatError::MetaLengthMismatch {
                meta: meta.len(),
                rows: n_rows,
            },
        ));
    }
    EmbeddingDataset::new(dim, vectors, labels, meta)
}

enum MetaReadError {
    Io(std::io::Error),
    Format(FormatError),
}

fn parse_meta(reader: impl BufRead) -> Result<(Vec<Option<u8>>, Vec<SpanMeta>), MetaReadError> {
    let mut labels = Vec::new();
    let mut meta = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(MetaReadError::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |reason: String| {
            MetaReadError::Format(FormatError::InvalidMeta {
                line: i + 1,
                reason,
            })
        };
        let m: MetaLine = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
        if matches!(m.label, Some(l) if l > 1) {
            return Err(invalid(format!("label {:?} is not 0, 1 or null", m.label)));
        }
        labels.push(m.label);
        meta.push(SpanMeta {
            row_id: m.row_id,
            doc_id: m.doc_id,
            text: m.text,
            token_count: m.token_count,
        });
    }
    Ok((labels, meta))
}

/// Stratified train/validation split; rows keep their original order.
pub fn split_dataset(
    ds: &EmbeddingDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "validation fraction {val_fraction} outside (0, 1)"
        )));
    }
    let labels = ds.require_labels()?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..=1u8 {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            return Err(Error::SingleClass(format!("no rows with label {class}")));
        }
        idx.shuffle(&mut seeded(seed, class as u64));
        let n_c = idx.len();
        let mut n_val = (val_fraction * n_c as f64).round() as usize;
        if n_c > 1 {
            n_val = n_val.min(n_c - 1);
        }
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// Unstratified split for unlabeled data such as SAE corpora.
pub fn split_random(
    ds: &EmbeddingDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "validation fraction {val_fraction} outside (0, 1)"
        )));
    }
    let mut idx: Vec<usize> = (0..ds.n_rows()).collect();
    idx.shuffle(&mut seeded(seed, 0));
    let n_val = (val_fraction * ds.n_rows() as f64).round() as usize;
    let (v, t) = idx.split_at(n_val);
    let (mut v, mut t) = (v.to_vec(), t.to_vec());
    v.sort_unstable();
    t.sort_unstable();
    Ok((ds.subset(&t), ds.subset(&v)))
}

/// Inverse-frequency weights `N / (2 * N_c)`, returned as `(w_neg, w_pos)`.
pub fn class_weights(labels: &[u8]) -> Result<(f64, f64)> {
    let n = labels.len();
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.iter().filter(|&&l| l == 0).count();
    if n_pos + n_neg != n {
        return Err(Error::InvalidDataset("labels must be 0 or 1".into()));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(format!("{n_neg} negatives, {n_pos} positives")));
    }
    let w = |n_c: usize| n as f64 / (2.0 * n_c as f64);
    Ok((w(n_neg), w(n_pos)))
}
