use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use serde_json::json;

use saereg_core::interpret::{explain_all, write_features_jsonl};
use saereg_core::sae::TopKSae;

use crate::config::{pick, PipelineConfig};
use crate::output::load_embeddings;

#[derive(Args)]
pub struct ExplainArgs {
    #[arg(long)]
    sae: PathBuf,
    /// Embeddings whose meta texts become the explanations.
    #[arg(long)]
    emb: PathBuf,
    /// Output features.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Spans kept per feature.
    #[arg(long)]
    top_m: Option<usize>,
    /// Accepted for uniformity; explanation is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run(a: ExplainArgs, cfg: &PipelineConfig) -> anyhow::Result<serde_json::Value> {
    let f = &cfg.explain;
    let seed = cfg.seed(a.seed, f.seed);
    let m = pick(a.top_m, f.top_m, 10);
    if m == 0 {
        bail!("top-m must be >= 1");
    }
    let sae = TopKSae::<f32>::read(&a.sae).with_context(|| format!("loading SAE {}", a.sae.display()))?;
    let ds = load_embeddings(&a.emb)?;
    let expl = explain_all(&sae, &ds, m)?;
    write_features_jsonl(&a.out, &expl)?;
    tracing::info!(explained = expl.len(), n_features = sae.n_features(), top_m = m, "wrote explanations");
    Ok(json!({
        "command": "explain",
        "seed": seed,
        "out": a.out,
        "features_explained": expl.len(),
        "n_features": sae.n_features(),
        "top_m": m,
    }))
}
