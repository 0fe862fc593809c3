//! Feature judging: summarise each explanation, verify the summary in an
//! independent request, rate its task relevance, and derive the set of
//! unintended features.

mod llm;
mod stub;

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::interpret::FeatureExplanation;

pub use llm::{
    ChatMessage, ChatRequest, ChatTransport, HttpTransport, JudgeClientConfig, LlmJudge,
    TransportError, API_KEY_ENV, PROMPT_VERSION,
};
pub use stub::{StubJudge, StubRule};

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("{stage} for feature {feature_id} failed after {attempts} attempts: {message}")]
    Transport {
        feature_id: usize,
        stage: Stage,
        attempts: usize,
        message: String,
    },
    #[error("unparseable {stage} response for feature {feature_id} (transcript {transcript_id}): {response:?}")]
    Malformed {
        feature_id: usize,
        stage: Stage,
        transcript_id: String,
        response: String,
    },
    #[error("feature {0} has no spans to judge")]
    EmptyExplanation(usize),
    #[error("summary is Cannot Tell; nothing to {0}")]
    NoSummary(Stage),
    #[error("rubric is empty")]
    EmptyRubric,
    #[error("transcript store: {0}")]
    Transcripts(String),
    #[error("invalid judge configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Summarize,
    Verify,
    Rate,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Summarize => "summarize",
            Stage::Verify => "verify",
            Stage::Rate => "rate",
        })
    }
}

/// Task relevance of a feature, ordered `No < Maybe < Probably < Yes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceLevel {
    No,
    Maybe,
    Probably,
    Yes,
}

impl RelevanceLevel {
    pub const ALL: [RelevanceLevel; 4] = [Self::No, Self::Maybe, Self::Probably, Self::Yes];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::No => "no",
            Self::Maybe => "maybe",
            Self::Probably => "probably",
            Self::Yes => "yes",
        }
    }
}

impl fmt::Display for RelevanceLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelevanceLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" => Ok(Self::Yes),
            "probably" => Ok(Self::Probably),
            "maybe" => Ok(Self::Maybe),
            "no" => Ok(Self::No),
            other => Err(format!("unknown relevance level {other:?}")),
        }
    }
}

/// Annotator summary of a feature, or its refusal to name a pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Summary {
    Text(String),
    CannotTell,
}

pub const CANNOT_TELL: &str = "CANNOT_TELL";

impl Summary {
    pub fn text(&self) -> Option<&str> {
        match self {
            Summary::Text(t) => Some(t),
            Summary::CannotTell => None,
        }
    }
}

impl Serialize for Summary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.text().unwrap_or(CANNOT_TELL))
    }
}

impl<'de> Deserialize<'de> for Summary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == CANNOT_TELL {
            Summary::CannotTell
        } else {
            Summary::Text(s)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub feature_id: usize,
    pub summary: Summary,
    pub verified: bool,
    /// Present only for verified, non-Cannot-Tell summaries.
    pub relevance: Option<RelevanceLevel>,
    pub transcript_ids: Vec<String>,
}

impl JudgeVerdict {
    pub fn is_consistent(&self) -> bool {
        self.relevance.is_none() || (self.summary != Summary::CannotTell && self.verified)
    }
}

/// Features judged to carry a clear meaning that is not relevant enough to
/// the task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnintendedSet {
    /// Sorted, unique.
    pub feature_ids: Vec<usize>,
    pub threshold: RelevanceLevel,
    /// Hex SHA-256 of the rubric text, when known.
    pub rubric_digest: Option<String>,
}

impl UnintendedSet {
    pub fn empty() -> Self {
        Self {
            feature_ids: Vec::new(),
            threshold: RelevanceLevel::Yes,
            rubric_digest: None,
        }
    }

    pub fn with_rubric(mut self, rubric: &str) -> Self {
        self.rubric_digest = Some(rubric_digest(rubric));
        self
    }

    pub fn len(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature_ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.feature_ids.binary_search(&id).is_ok()
    }
}

pub fn rubric_digest(rubric: &str) -> String {
    hex::encode(Sha256::digest(rubric.as_bytes()))
}

/// A feature is unintended iff it has a summary, the summary was verified,
/// and its relevance is strictly below `threshold`.
pub fn identify_unintended(
    verdicts: &[JudgeVerdict],
    threshold: RelevanceLevel,
) -> crate::Result<UnintendedSet> {
    let mut ids: Vec<usize> = verdicts.iter().map(|v| v.feature_id).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(crate::Error::DuplicateFeature(w[0]));
    }
    let mut feature_ids: Vec<usize> = verdicts
        .iter()
        .filter(|v| v.summary != Summary::CannotTell && v.verified)
        .filter(|v| matches!(v.relevance, Some(r) if r < threshold))
        .map(|v| v.feature_id)
        .collect();
    feature_ids.sort_unstable();
    Ok(UnintendedSet {
        feature_ids,
        threshold,
        rubric_digest: None,
    })
}

/// One persisted request/response exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub feature_id: usize,
    pub stage: String,
    pub attempt: usize,
    pub request: serde_json::Value,
    pub response: Option<String>,
    pub error: Option<String>,
}

pub trait TranscriptSink: Sync {
    /// Must have durably stored the transcript when it returns.
    fn persist(&self, t: &Transcript) -> Result<(), JudgeError>;
}

/// Writes one `<id>.json` file per transcript.
#[derive(Debug, Clone)]
pub struct TranscriptDir {
    dir: PathBuf,
}

impl TranscriptDir {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self, JudgeError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| JudgeError::Transcripts(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    pub fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }
}

impl TranscriptSink for TranscriptDir {
    fn persist(&self, t: &Transcript) -> Result<(), JudgeError> {
        let path = self.path_for(&t.id);
        let body = serde_json::to_vec_pretty(t).map_err(|e| JudgeError::Transcripts(e.to_string()))?;
        fs::write(&path, body).map_err(|e| JudgeError::Transcripts(format!("{}: {e}", path.display())))
    }
}

/// Keeps transcripts in memory.
#[derive(Debug, Default)]
pub struct MemorySink(pub Mutex<Vec<Transcript>>);

impl TranscriptSink for MemorySink {
    fn persist(&self, t: &Transcript) -> Result<(), JudgeError> {
        self.0.lock().expect("sink poisoned").push(t.clone());
        Ok(())
    }
}

/// Per-feature call context; collects the ids of persisted transcripts.
pub struct CallContext<'a> {
    pub feature_id: usize,
    sink: &'a dyn TranscriptSink,
    ids: Vec<String>,
}

impl<'a> CallContext<'a> {
    pub fn new(feature_id: usize, sink: &'a dyn TranscriptSink) -> Self {
        Self {
            feature_id,
            sink,
            ids: Vec::new(),
        }
    }

    pub fn record(
        &mut self,
        stage: Stage,
        attempt: usize,
        request: serde_json::Value,
        response: Option<String>,
        error: Option<String>,
    ) -> Result<String, JudgeError> {
        let id = format!("f{:07}-{stage}-{attempt}", self.feature_id);
        let t = Transcript {
            id: id.clone(),
            feature_id: self.feature_id,
            stage: stage.to_string(),
            attempt,
            request,
            response,
            error,
        };
        self.sink.persist(&t)?;
        self.ids.push(id.clone());
        Ok(id)
    }

    pub fn transcript_ids(&self) -> &[String] {
        &self.ids
    }
}

/// The three annotator calls. Implementations must not share conversational
/// state between calls.
pub trait JudgeBackend: Sync {
    fn summarize(&self, ctx: &mut CallContext<'_>, expl: &FeatureExplanation) -> Result<Summary, JudgeError>;
    fn verify(&self, ctx: &mut CallContext<'_>, expl: &FeatureExplanation, summary: &str) -> Result<bool, JudgeError>;
    fn rate_relevance(&self, ctx: &mut CallContext<'_>, summary: &str, rubric: &str) -> Result<RelevanceLevel, JudgeError>;
}

/// Summarise, verify and rate a single feature.
pub fn judge_feature(
    backend: &dyn JudgeBackend,
    sink: &dyn TranscriptSink,
    expl: &FeatureExplanation,
    rubric: &str,
) -> Result<JudgeVerdict, JudgeError> {
    if expl.is_empty() {
        return Err(JudgeError::EmptyExplanation(expl.feature_id));
    }
    if rubric.trim().is_empty() {
        return Err(JudgeError::EmptyRubric);
    }
    let mut ctx = CallContext::new(expl.feature_id, sink);
    let summary = backend.summarize(&mut ctx, expl)?;
    let (verified, relevance) = match &summary {
        Summary::CannotTell => (false, None),
        Summary::Text(text) => {
            if backend.verify(&mut ctx, expl, text)? {
                (true, Some(backend.rate_relevance(&mut ctx, text, rubric)?))
            } else {
                (false, None)
            }
        }
    };
    Ok(JudgeVerdict {
        feature_id: expl.feature_id,
        summary,
        verified,
        relevance,
        transcript_ids: ctx.ids,
    })
}

/// Judges every explanation with at most `max_concurrent` features in
/// flight. Verdicts come back sorted by feature id.
pub fn judge_all(
    backend: &dyn JudgeBackend,
    sink: &dyn TranscriptSink,
    explanations: &[FeatureExplanation],
    rubric: &str,
    max_concurrent: usize,
) -> Result<Vec<JudgeVerdict>, JudgeError> {
    if max_concurrent == 0 {
        return Err(JudgeError::Config("max_concurrent_requests must be >= 1".into()));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<JudgeVerdict, JudgeError>)>> = Mutex::new(Vec::new());
    let workers = max_concurrent.min(explanations.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(expl) = explanations.get(i) else { break };
                let r = judge_feature(backend, sink, expl, rubric);
                results.lock().expect("results poisoned").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("results poisoned");
    results.sort_by_key(|(i, _)| *i);
    let mut verdicts = results
        .into_iter()
        .map(|(_, r)| r)
        .collect::<Result<Vec<_>, _>>()?;
    verdicts.sort_by_key(|v| v.feature_id);
    Ok(verdicts)
}

pub fn write_verdicts_jsonl(path: &Path, verdicts: &[JudgeVerdict]) -> crate::Result<()> {
    let file = fs::File::create(path).map_err(|e| crate::Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in verdicts {
        serde_json::to_writer(&mut w, v)?;
        w.write_all(b"\n").map_err(|e| crate::Error::io(path, e))?;
    }
    w.flush().map_err(|e| crate::Error::io(path, e))
}

pub fn read_verdicts_jsonl(path: &Path) -> crate::Result<Vec<JudgeVerdict>> {
    let text = fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: JudgeVerdict = serde_json::from_str(line).map_err(|e| {
            crate::Error::format(
                path,
                crate::error::FormatError::InvalidMeta {
                    line: i + 1,
                    reason: e.to_string(),
                },
            )
        })?;
        if !v.is_consistent() {
            return Err(crate::Error::format(
                path,
                crate::error::FormatError::InvalidMeta {
                    line: i + 1,
                    reason: "relevance requires a verified summary".into(),
                },
            ));
        }
        out.push(v);
    }
    Ok(out)
}
