//! Text explanations of learned features: for each feature, the `m` spans
//! whose embeddings activate it most strongly after Top-K.
//!
//! A row scores zero on a feature that is not in its Top-K set. Rows whose
//! span has no tokens are never reported. Ties are ranked by ascending
//! `row_id`, which makes the output independent of how rows are sharded.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingDataset;
use crate::error::{Error, FormatError, Result};
use crate::real::Real;
use crate::sae::TopKSae;

const CHUNK_ROWS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedSpan {
    pub row_id: u64,
    pub doc_id: String,
    pub text: String,
    pub activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExplanation {
    pub feature_id: usize,
    /// Non-increasing by activation; every activation is positive.
    pub spans: Vec<ExplainedSpan>,
    /// Explainable rows on which the feature fired.
    pub n_active_rows: usize,
    #[serde(skip)]
    pub m_requested: usize,
}

impl FeatureExplanation {
    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.spans.iter().map(|s| s.text.as_str())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ranked {
    activation: f64,
    row_id: u64,
    row: usize,
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    /// Greater means ranked earlier.
    fn cmp(&self, other: &Self) -> Ordering {
        self.activation
            .total_cmp(&other.activation)
            .then(other.row_id.cmp(&self.row_id))
    }
}

/// Bounded min-heap holding the best `m` entries.
#[derive(Debug, Default, Clone)]
struct TopM {
    heap: BinaryHeap<Reverse<Ranked>>,
    n_active: usize,
}

impl TopM {
    fn offer(&mut self, r: Ranked, m: usize) {
        self.heap.push(Reverse(r));
        if self.heap.len() > m {
            self.heap.pop();
        }
    }

    fn merge(&mut self, other: TopM, m: usize) {
        self.n_active += other.n_active;
        for Reverse(r) in other.heap {
            self.offer(r, m);
        }
    }

    fn into_explanation(self, feature_id: usize, ds: &EmbeddingDataset, m: usize) -> FeatureExplanation {
        let mut ranked: Vec<Ranked> = self.heap.into_iter().map(|Reverse(r)| r).collect();
        ranked.sort_unstable_by(|a, b| b.cmp(a));
        let spans = ranked
            .into_iter()
            .map(|r| {
                let meta = &ds.meta()[r.row];
                ExplainedSpan {
                    row_id: meta.row_id,
                    doc_id: meta.doc_id.clone(),
                    text: meta.text.clone(),
                    activation: r.activation,
                }
            })
            .collect();
        FeatureExplanation {
            feature_id,
            spans,
            n_active_rows: self.n_active,
            m_requested: m,
        }
    }
}

fn check<F: Real>(sae: &TopKSae<F>, ds: &EmbeddingDataset, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidConfig("m must be at least 1".into()));
    }
    if ds.dim() != sae.dim() {
        return Err(Error::DimensionMismatch {
            expected: sae.dim(),
            actual: ds.dim(),
        });
    }
    Ok(())
}

/// Scans `ds` once, feeding `(row, feature, activation)` for each eligible row
/// into per-shard accumulators built by `fold`.
fn scan<F, T, Fold, Merge>(sae: &TopKSae<F>, ds: &EmbeddingDataset, init: impl Fn() -> T + Sync + Send, fold: Fold, merge: Merge) -> T
where
    F: Real,
    T: Send,
    Fold: Fn(&mut T, usize, usize, f64) + Sync + Send,
    Merge: Fn(T, T) -> T + Sync + Send,
{
    let x = ds.to_matrix::<F>();
    let shards: Vec<T> = x
        .axis_chunks_iter(Axis(0), CHUNK_ROWS)
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(ci, chunk)| {
            let mut acc = init();
            let acts = sae.encode_batch(chunk).expect("dimension checked");
            for (i, a) in acts.into_iter().enumerate() {
                let row = ci * CHUNK_ROWS + i;
                if !ds.meta()[row].is_explainable() {
                    continue;
                }
                for (c, v) in a.iter() {
                    fold(&mut acc, row, c, v.as_f64());
                }
            }
            acc
        })
        .collect();
    shards.into_iter().reduce(merge).unwrap_or_else(init)
}

/// The `m` highest-activating spans for one feature.
pub fn top_spans<F: Real>(
    sae: &TopKSae<F>,
    ds: &EmbeddingDataset,
    feature_id: usize,
    m: usize,
) -> Result<FeatureExplanation> {
    check(sae, ds, m)?;
    if feature_id >= sae.n_features() {
        return Err(Error::IndexOutOfRange {
            index: feature_id,
            len: sae.n_features(),
        });
    }
    let top = scan(
        sae,
        ds,
        TopM::default,
        |acc, row, c, v| {
            if c == feature_id {
                acc.n_active += 1;
                acc.offer(
                    Ranked {
                        activation: v,
                        row_id: ds.meta()[row].row_id,
                        row,
                    },
                    m,
                );
            }
        },
        |mut a, b| {
            a.merge(b, m);
            a
        },
    );
    Ok(top.into_explanation(feature_id, ds, m))
}

/// One explanation per feature that fires on at least one explainable row,
/// in feature order. Equivalent to calling [`top_spans`] per feature and
/// dropping empty results.
pub fn explain_all<F: Real>(
    sae: &TopKSae<F>,
    ds: &EmbeddingDataset,
    m: usize,
) -> Result<Vec<FeatureExplanation>> {
    check(sae, ds, m)?;
    let c = sae.n_features();
    let tops = scan(
        sae,
        ds,
        || vec![TopM::default(); c],
        |acc, row, f, v| {
            acc[f].n_active += 1;
            acc[f].offer(
                Ranked {
                    activation: v,
                    row_id: ds.meta()[row].row_id,
                    row,
                },
                m,
            );
        },
        |mut a, b| {
            for (x, y) in a.iter_mut().zip(b) {
                x.merge(y, m);
            }
            a
        },
    );
    Ok(tops
        .into_iter()
        .enumerate()
        .filter(|(_, t)| t.n_active > 0)
        .map(|(f, t)| t.into_explanation(f, ds, m))
        .collect())
}

pub fn write_features_jsonl(path: &Path, explanations: &[FeatureExplanation]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in explanations {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features_jsonl(path: &Path) -> Result<Vec<FeatureExplanation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut e: FeatureExplanation = serde_json::from_str(line).map_err(|err| {
            Error::format(
                path,
                FormatError::InvalidMeta {
                    line: i + 1,
                    reason: err.to_string(),
                },
            )
        })?;
        e.m_requested = e.spans.len();
        out.push(e);
    }
    Ok(out)
}
