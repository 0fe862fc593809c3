//! Judge backed by an OpenAI-style chat-completion endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{CallContext, JudgeBackend, JudgeError, RelevanceLevel, Stage, Summary};
use crate::interpret::FeatureExplanation;

/// Environment variable holding the bearer token for the endpoint.
pub const API_KEY_ENV: &str = "SAEREG_JUDGE_API_KEY";

/// Bumped whenever a prompt template changes.
pub const PROMPT_VERSION: &str = "v1";

const SUMMARIZE_PROMPT: &str = include_str!("prompts/summarize.txt");
const VERIFY_PROMPT: &str = include_str!("prompts/verify.txt");
const RATE_PROMPT: &str = include_str!("prompts/rate.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeClientConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_response_tokens: u32,
    pub max_retries: usize,
    pub max_concurrent_requests: usize,
    /// First backoff delay; doubles on each retry.
    pub backoff_base_ms: u64,
    pub timeout_secs: u64,
}

impl Default for JudgeClientConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            model_name: "gpt-4o-mini-2024-07-18".into(),
            temperature: 0.0,
            max_response_tokens: 1024,
            max_retries: 3,
            max_concurrent_requests: 4,
            backoff_base_ms: 1000,
            timeout_secs: 120,
        }
    }
}

impl JudgeClientConfig {
    pub fn validate(&self) -> Result<(), JudgeError> {
        if self.endpoint_url.is_empty() || self.model_name.is_empty() {
            return Err(JudgeError::Config("endpoint_url and model_name are required".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(JudgeError::Config(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_response_tokens == 0 || self.max_concurrent_requests == 0 {
            return Err(JudgeError::Config(
                "max_response_tokens and max_concurrent_requests must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError {
    pub retryable: bool,
    pub message: String,
}

/// Sends one chat request and returns the assistant's message text.
pub trait ChatTransport: Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            url: url.into(),
            api_key,
        }
    }

    /// Reads the key from [`API_KEY_ENV`] if set.
    pub fn from_config(cfg: &JudgeClientConfig) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(cfg.endpoint_url.clone(), key, Duration::from_secs(cfg.timeout_secs))
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChatMessage,
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(request).map_err(|e| TransportError {
            retryable: true,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| TransportError {
            retryable: true,
            message: e.to_string(),
        })?;
        if !(200..300).contains(&status) {
            return Err(TransportError {
                retryable: status == 429 || status >= 500,
                message: format!("HTTP {status}: {body}"),
            });
        }
        let parsed: ChatResponse = serde_json::from_str(&body).map_err(|e| TransportError {
            retryable: true,
            message: format!("bad response body: {e}"),
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| TransportError {
                retryable: true,
                message: "response has no choices".into(),
            })
    }
}

pub struct LlmJudge<T> {
    transport: T,
    cfg: JudgeClientConfig,
}

fn first_word(s: &str) -> String {
    s.trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase()
}

/// Text after `label:` on the first line that starts with it.
fn labelled<'a>(text: &'a str, label: &str) -> Option<&'a str> {
    text.lines().find_map(|line| {
        let line = line.trim().trim_start_matches(['*', '#', '-', ' ']);
        let head = line.get(..label.len())?;
        if head.eq_ignore_ascii_case(label) {
            line[label.len()..].trim_start().strip_prefix(':').map(str::trim)
        } else {
            None
        }
    })
}

fn is_cannot_tell(s: &str) -> bool {
    s.trim_start_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
        .starts_with("cannot tell")
}

pub(crate) fn parse_summary(text: &str) -> Option<Summary> {
    if let Some(rest) = labelled(text, "summary") {
        let rest = rest.trim_matches(|c: char| c == '"' || c == '*' || c.is_whitespace());
        if rest.is_empty() {
            return None;
        }
        return Some(if is_cannot_tell(rest) {
            Summary::CannotTell
        } else {
            Summary::Text(rest.to_string())
        });
    }
    is_cannot_tell(text).then_some(Summary::CannotTell)
}

pub(crate) fn parse_verify(text: &str) -> Option<bool> {
    let word = first_word(labelled(text, "verdict").unwrap_or(text));
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

pub(crate) fn parse_relevance(text: &str) -> Option<RelevanceLevel> {
    first_word(labelled(text, "relevance").unwrap_or(text)).parse().ok()
}

fn format_spans(expl: &FeatureExplanation) -> String {
    let mut s = String::from("Spans:\n");
    for (i, t) in expl.texts().enumerate() {
        s.push_str(&format!("{}. {}\n", i + 1, t.replace('\n', " ")));
    }
    s
}

enum Failure {
    Transport(String),
    Malformed { transcript_id: String, response: String },
}

impl<T: ChatTransport> LlmJudge<T> {
    pub fn new(transport: T, cfg: JudgeClientConfig) -> Result<Self, JudgeError> {
        cfg.validate()?;
        Ok(Self { transport, cfg })
    }

    pub fn config(&self) -> &JudgeClientConfig {
        &self.cfg
    }

    fn request(&self, system: &str, user: String) -> ChatRequest {
        ChatRequest {
            model: self.cfg.model_name.clone(),
            messages: vec![ChatMessage::new("system", system), ChatMessage::new("user", user)],
            temperature: self.cfg.temperature,
            max_tokens: self.cfg.max_response_tokens,
        }
    }

    /// Sends `request` until `parse` accepts a response, persisting every
    /// attempt before acting on it.
    fn call<R>(
        &self,
        ctx: &mut CallContext<'_>,
        stage: Stage,
        request: ChatRequest,
        parse: impl Fn(&str) -> Option<R>,
    ) -> Result<R, JudgeError> {
        let request_json = serde_json::to_value(&request).expect("request serializes");
        let attempts = self.cfg.max_retries + 1;
        let mut failure = Failure::Transport("no attempt made".into());
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.cfg.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.transport.send(&request) {
                Ok(text) => {
                    let id = ctx.record(stage, attempt, request_json.clone(), Some(text.clone()), None)?;
                    if let Some(r) = parse(&text) {
                        return Ok(r);
                    }
                    tracing::warn!(feature = ctx.feature_id, %stage, attempt, "unparseable response");
                    failure = Failure::Malformed {
                        transcript_id: id,
                        response: text,
                    };
                }
                Err(e) => {
                    ctx.record(stage, attempt, request_json.clone(), None, Some(e.message.clone()))?;
                    tracing::warn!(feature = ctx.feature_id, %stage, attempt, error = %e.message, "request failed");
                    if !e.retryable {
                        return Err(JudgeError::Transport {
                            feature_id: ctx.feature_id,
                            stage,
                            attempts: attempt + 1,
                            message: e.message,
                        });
                    }
                    failure = Failure::Transport(e.message);
                }
            }
        }
        Err(match failure {
            Failure::Transport(message) => JudgeError::Transport {
                feature_id: ctx.feature_id,
                stage,
                attempts,
                message,
            },
            Failure::Malformed {
                transcript_id,
                response,
            } => JudgeError::Malformed {
                feature_id: ctx.feature_id,
                stage,
                transcript_id,
                response,
            },
        })
    }
}

impl<T: ChatTransport> JudgeBackend for LlmJudge<T> {
    fn summarize(&self, ctx: &mut CallContext<'_>, expl: &FeatureExplanation) -> Result<Summary, JudgeError> {
        let req = self.request(SUMMARIZE_PROMPT, format_spans(expl));
        self.call(ctx, Stage::Summarize, req, parse_summary)
    }

    fn verify(&self, ctx: &mut CallContext<'_>, expl: &FeatureExplanation, summary: &str) -> Result<bool, JudgeError> {
        let user = format!("{}\nProposed summary: {summary}\n", format_spans(expl));
        let req = self.request(VERIFY_PROMPT, user);
        self.call(ctx, Stage::Verify, req, parse_verify)
    }

    fn rate_relevance(&self, ctx: &mut CallContext<'_>, summary: &str, rubric: &str) -> Result<RelevanceLevel, JudgeError> {
        let user = format!("Guideline:\n{rubric}\n\nConcept: {summary}\n");
        let req = self.request(RATE_PROMPT, user);
        self.call(ctx, Stage::Rate, req, parse_relevance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpret::ExplainedSpan;
    use crate::judge::{judge_feature, MemorySink};
    use std::sync::Mutex;

    struct Scripted(Mutex<Vec<Result<String, TransportError>>>);

    impl Scripted {
        fn new(mut replies: Vec<Result<String, TransportError>>) -> Self {
            replies.reverse();
            Self(Mutex::new(replies))
        }
    }

    impl ChatTransport for Scripted {
        fn send(&self, _: &ChatRequest) -> Result<String, TransportError> {
            self.0.lock().unwrap().pop().expect("script exhausted")
        }
    }

    fn ok(s: &str) -> Result<String, TransportError> {
        Ok(s.into())
    }

    fn busy() -> Result<String, TransportError> {
        Err(TransportError {
            retryable: true,
            message: "HTTP 429".into(),
        })
    }

    fn fast() -> JudgeClientConfig {
        JudgeClientConfig {
            backoff_base_ms: 0,
            ..Default::default()
        }
    }

    fn expl() -> FeatureExplanation {
        FeatureExplanation {
            feature_id: 12,
            spans: vec![ExplainedSpan {
                row_id: 0,
                doc_id: "d".into(),
                text: "where is his home".into(),
                activation: 2.0,
            }],
            n_active_rows: 1,
            m_requested: 10,
        }
    }

    #[test]
    fn parsers() {
        assert_eq!(parse_summary("Summary: home address"), Some(Summary::Text("home address".into())));
        assert_eq!(parse_summary("**Summary:** \"x y\""), Some(Summary::Text("x y".into())));
        assert_eq!(parse_summary("Cannot Tell."), Some(Summary::CannotTell));
        assert_eq!(parse_summary("Summary: Cannot tell"), Some(Summary::CannotTell));
        assert_eq!(parse_summary("the spans are about cats"), None);
        assert_eq!(parse_verify("Verdict: Yes."), Some(true));
        assert_eq!(parse_verify("no, it does not"), Some(false));
        assert_eq!(parse_verify("nope"), None);
        assert_eq!(parse_relevance("Relevance: Probably"), Some(RelevanceLevel::Probably));
        assert_eq!(parse_relevance("maybe"), Some(RelevanceLevel::Maybe));
        assert_eq!(parse_relevance("Relevance: somewhat"), None);
    }

    #[test]
    fn retries_then_succeeds() {
        let judge = LlmJudge::new(
            Scripted::new(vec![busy(), ok("Summary: home"), ok("Verdict: yes"), ok("garbled"), ok("Relevance: no")]),
            fast(),
        )
        .unwrap();
        let sink = MemorySink::default();
        let v = judge_feature(&judge, &sink, &expl(), "privacy").unwrap();
        assert_eq!(v.summary, Summary::Text("home".into()));
        assert!(v.verified);
        assert_eq!(v.relevance, Some(RelevanceLevel::No));
        assert_eq!(
            v.transcript_ids,
            vec![
                "f0000012-summarize-0",
                "f0000012-summarize-1",
                "f0000012-verify-0",
                "f0000012-rate-0",
                "f0000012-rate-1"
            ]
        );
        let stored = sink.0.lock().unwrap();
        assert_eq!(stored[0].error.as_deref(), Some("HTTP 429"));
        assert_eq!(stored[3].response.as_deref(), Some("garbled"));
    }

    #[test]
    fn malformed_after_retries_carries_transcript() {
        let judge = LlmJudge::new(Scripted::new(vec![ok("?"), ok("?"), ok("?"), ok("??")]), fast()).unwrap();
        let sink = MemorySink::default();
        match judge_feature(&judge, &sink, &expl(), "r") {
            Err(JudgeError::Malformed {
                transcript_id, response, ..
            }) => {
                assert_eq!(transcript_id, "f0000012-summarize-3");
                assert_eq!(response, "??");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(sink.0.lock().unwrap().len(), 4);
    }

    #[test]
    fn non_retryable_fails_fast() {
        let fatal = Err(TransportError {
            retryable: false,
            message: "HTTP 401".into(),
        });
        let judge = LlmJudge::new(Scripted::new(vec![fatal]), fast()).unwrap();
        let sink = MemorySink::default();
        assert!(matches!(
            judge_feature(&judge, &sink, &expl(), "r"),
            Err(JudgeError::Transport { attempts: 1, .. })
        ));
    }

    #[test]
    fn invalid_config() {
        let cfg = JudgeClientConfig {
            max_concurrent_requests: 0,
            ..fast()
        };
        assert!(LlmJudge::new(Scripted::new(vec![]), cfg).is_err());
    }
}
