use clap::Args;
use serde_json::json;

use saereg_core::samplesize::{n_normal, n_sparse, SampleSizeQuery};

use crate::config::{pick, PipelineConfig};

#[derive(Args)]
pub struct SampleSizeArgs {
    /// Probability that the feature is active.
    #[arg(long, visible_alias = "activation-prob")]
    p: Option<f64>,
    #[arg(long)]
    confidence: Option<f64>,
    /// Margin of error in units of sigma.
    #[arg(long)]
    rel_margin: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Use the exact normal quantile instead of z rounded to two decimals.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    exact_z: Option<bool>,
    /// Accepted for uniformity; the computation is exact.
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run(a: SampleSizeArgs, cfg: &PipelineConfig) -> anyhow::Result<serde_json::Value> {
    let f = &cfg.sample_size;
    let _ = cfg.seed(a.seed, f.seed);
    let q = SampleSizeQuery {
        activation_prob: pick(a.p, f.p, 0.01),
        confidence: pick(a.confidence, f.confidence, 0.95),
        rel_margin: pick(a.rel_margin, f.rel_margin, 0.1),
        sigma: pick(a.sigma, f.sigma, 1.0),
        exact_z: pick(a.exact_z, f.exact_z, false),
    };
    q.validate()?;
    Ok(json!({
        "z": q.z()?,
        "n_normal": n_normal(&q)?,
        "n_sparse": n_sparse(&q)?,
    }))
}
