//! Deterministic offline judge driven by a keyword rule table.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{CallContext, JudgeBackend, JudgeError, RelevanceLevel, Stage, Summary};
use crate::interpret::FeatureExplanation;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubRule {
    /// Case-insensitive substring looked up in span texts.
    pub keyword: String,
    pub summary: String,
    pub relevance: RelevanceLevel,
}

/// Summarises a feature with the rule whose keyword occurs in the most spans,
/// provided that is a strict majority (first rule wins ties). Verification
/// re-derives the summary and compares. Rating returns the relevance of the
/// first rule whose summary or keyword appears in the summary, else `Maybe`.
#[derive(Debug, Clone, Default)]
pub struct StubJudge {
    rules: Vec<StubRule>,
}

fn contains_ci(haystack: &str, needle: &str) -> bool {
    haystack.to_lowercase().contains(&needle.to_lowercase())
}

impl StubJudge {
    pub fn new(rules: Vec<StubRule>) -> Result<Self, JudgeError> {
        if let Some(r) = rules.iter().find(|r| r.keyword.trim().is_empty() || r.summary.trim().is_empty()) {
            return Err(JudgeError::Config(format!("stub rule has empty keyword or summary: {r:?}")));
        }
        Ok(Self { rules })
    }

    pub fn from_json(text: &str) -> Result<Self, JudgeError> {
        let rules: Vec<StubRule> =
            serde_json::from_str(text).map_err(|e| JudgeError::Config(format!("stub rules: {e}")))?;
        Self::new(rules)
    }

    pub fn from_file(path: &Path) -> Result<Self, JudgeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| JudgeError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn rules(&self) -> &[StubRule] {
        &self.rules
    }

    fn pick(&self, expl: &FeatureExplanation) -> Option<&StubRule> {
        let n = expl.spans.len();
        let mut best: Option<(&StubRule, usize)> = None;
        for rule in &self.rules {
            let hits = expl.texts().filter(|t| contains_ci(t, &rule.keyword)).count();
            if best.is_none_or(|(_, b)| hits > b) {
                best = Some((rule, hits));
            }
        }
        best.filter(|&(_, hits)| 2 * hits > n).map(|(r, _)| r)
    }

    fn derive(&self, expl: &FeatureExplanation) -> Summary {
        match self.pick(expl) {
            Some(r) => Summary::Text(r.summary.clone()),
            None => Summary::CannotTell,
        }
    }
}

impl JudgeBackend for StubJudge {
    fn summarize(&self, ctx: &mut CallContext<'_>, expl: &FeatureExplanation) -> Result<Summary, JudgeError> {
        let s = self.derive(expl);
        let request = json!({ "spans": expl.texts().collect::<Vec<_>>() });
        let response = serde_json::to_value(&s).expect("summary serializes");
        ctx.record(Stage::Summarize, 0, request, response.as_str().map(String::from), None)?;
        Ok(s)
    }

    fn verify(&self, ctx: &mut CallContext<'_>, expl: &FeatureExplanation, summary: &str) -> Result<bool, JudgeError> {
        let ok = self.derive(expl).text() == Some(summary);
        let request = json!({ "spans": expl.texts().collect::<Vec<_>>(), "summary": summary });
        ctx.record(Stage::Verify, 0, request, Some(if ok { "yes" } else { "no" }.into()), None)?;
        Ok(ok)
    }

    fn rate_relevance(&self, ctx: &mut CallContext<'_>, summary: &str, rubric: &str) -> Result<RelevanceLevel, JudgeError> {
        let level = self
            .rules
            .iter()
            .find(|r| contains_ci(summary, &r.summary) || contains_ci(summary, &r.keyword))
            .map_or(RelevanceLevel::Maybe, |r| r.relevance);
        let request = json!({ "summary": summary, "rubric": rubric });
        ctx.record(Stage::Rate, 0, request, Some(level.to_string()), None)?;
        Ok(level)
    }
}
