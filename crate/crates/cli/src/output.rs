use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use saereg_core::embedding::{read_embeddings, EmbeddingDataset};

pub fn load_embeddings(path: &Path) -> anyhow::Result<EmbeddingDataset> {
    let ds = read_embeddings(path).with_context(|| format!("loading embeddings {}", path.display()))?;
    tracing::info!(path = %path.display(), rows = ds.n_rows(), dim = ds.dim(), "loaded embeddings");
    Ok(ds)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `1e-3` rather than `0.001` in logs.
pub fn sci(v: f64) -> String {
    format!("{v:e}")
}
