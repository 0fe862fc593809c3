use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use serde_json::json;

use saereg_core::interpret::read_features_jsonl;
use saereg_core::judge::{
    identify_unintended, judge_all, write_verdicts_jsonl, HttpTransport, JudgeBackend, JudgeClientConfig, LlmJudge,
    RelevanceLevel, StubJudge, TranscriptDir, API_KEY_ENV,
};

use crate::config::{pick, PipelineConfig};
use crate::output::write_json;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Threshold {
    /// Unintended unless rated Yes.
    Yes,
    /// Unintended when rated Maybe or No.
    Probably,
}

impl From<Threshold> for RelevanceLevel {
    fn from(t: Threshold) -> Self {
        match t {
            Threshold::Yes => RelevanceLevel::Yes,
            Threshold::Probably => RelevanceLevel::Probably,
        }
    }
}

#[derive(Args)]
pub struct JudgeArgs {
    /// features.jsonl from `explain`.
    #[arg(long)]
    features: PathBuf,
    /// Output verdicts.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Unintended feature set (JSON); defaults to unintended.json next to --out.
    #[arg(long)]
    unintended_out: Option<PathBuf>,
    /// Transcript directory; defaults to transcripts/ next to --out.
    #[arg(long)]
    transcripts: Option<PathBuf>,
    /// Offline keyword rule table (JSON) instead of the chat endpoint.
    #[arg(long)]
    stub: Option<PathBuf>,
    /// Task rubric text.
    #[arg(long, conflicts_with = "rubric_file")]
    rubric: Option<String>,
    #[arg(long)]
    rubric_file: Option<PathBuf>,
    #[arg(long, value_enum)]
    threshold: Option<Threshold>,
    /// Features judged in parallel.
    #[arg(long)]
    max_concurrent: Option<usize>,
    /// Accepted for uniformity; the stub is deterministic and the live
    /// client samples at the configured temperature.
    #[arg(long)]
    seed: Option<u64>,
}

fn sibling(out: &Path, name: &str) -> PathBuf {
    out.parent().unwrap_or(Path::new(".")).join(name)
}

pub fn run(a: JudgeArgs, cfg: &PipelineConfig) -> anyhow::Result<serde_json::Value> {
    let f = &cfg.judge;
    let seed = cfg.seed(a.seed, f.seed);
    let threshold: RelevanceLevel = match (a.threshold, &f.threshold) {
        (Some(t), _) => t.into(),
        (None, Some(s)) => match Threshold::from_str(s, true) {
            Ok(t) => t.into(),
            Err(_) => bail!("threshold must be yes or probably, got {s:?}"),
        },
        (None, None) => RelevanceLevel::Yes,
    };
    let rubric = match (&a.rubric, &a.rubric_file) {
        (Some(r), _) => r.clone(),
        (None, Some(p)) => std::fs::read_to_string(p).with_context(|| format!("reading rubric {}", p.display()))?,
        (None, None) => match &f.rubric {
            Some(r) => r.clone(),
            None => bail!("a rubric is required (--rubric, --rubric-file or [judge] rubric)"),
        },
    };
    if rubric.trim().is_empty() {
        bail!("rubric is empty");
    }
    let client = f.client.clone().unwrap_or_default();
    client.validate()?;
    let max_concurrent = pick(a.max_concurrent, f.max_concurrent, client.max_concurrent_requests);

    let backend: Box<dyn JudgeBackend> = match &a.stub {
        Some(path) => Box::new(StubJudge::from_file(path)?),
        None => Box::new(live_judge(client)?),
    };
    let explanations = read_features_jsonl(&a.features)?;
    let transcripts = a.transcripts.clone().unwrap_or_else(|| sibling(&a.out, "transcripts"));
    let sink = TranscriptDir::create(&transcripts)?;
    tracing::info!(features = explanations.len(), %threshold, stub = a.stub.is_some(), max_concurrent, "judging");

    let verdicts = judge_all(backend.as_ref(), &sink, &explanations, &rubric, max_concurrent)?;
    write_verdicts_jsonl(&a.out, &verdicts)?;
    let unintended = identify_unintended(&verdicts, threshold)?.with_rubric(&rubric);
    let unintended_out = a.unintended_out.clone().unwrap_or_else(|| sibling(&a.out, "unintended.json"));
    write_json(&unintended_out, &unintended)?;
    let verified = verdicts.iter().filter(|v| v.verified).count();
    tracing::info!(verdicts = verdicts.len(), verified, unintended = unintended.len(), "judged");
    Ok(json!({
        "command": "judge",
        "seed": seed,
        "out": a.out,
        "unintended_out": unintended_out,
        "transcripts": transcripts,
        "verdicts": verdicts.len(),
        "verified": verified,
        "unintended": unintended.feature_ids,
        "threshold": threshold,
    }))
}

fn live_judge(client: JudgeClientConfig) -> anyhow::Result<LlmJudge<HttpTransport>> {
    if std::env::var(API_KEY_ENV).map_or(true, |k| k.is_empty()) {
        tracing::warn!("{API_KEY_ENV} is not set; requests go out without credentials");
    }
    tracing::info!(endpoint = %client.endpoint_url, model = %client.model_name, "using live judge");
    Ok(LlmJudge::new(HttpTransport::from_config(&client), client)?)
}
