//! Access to the external language models used by the pipeline.
//!
//! Four roles talk to models: the *extractor* builds state graphs, the
//! *rewriter* repairs thoughts at pruning seams, the *scorer* returns token
//! log-likelihoods for candidate selection and the *judge* grades answers.
//! Each role is served by an [`Endpoint`]: a [`Transport`] plus retry with
//! exponential backoff, an in-flight request cap and call accounting.
//!
//! [`HttpTransport`] speaks the chat-completions wire protocol;
//! [`MockTransport`] replays a [`MockScript`] for offline runs.

mod fenced;
mod http;
mod mock;

use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::PromptSet;

pub use fenced::extract_fenced_json;
pub use http::HttpTransport;
pub use mock::{FailureKind, Matcher, MockMode, MockResponse, MockRule, MockScript, MockTransport, RecordedRequest};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("authentication error: {0}")]
    Auth(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("endpoint cannot score token log-probabilities: {0}")]
    UnsupportedEndpoint(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    /// The mock script had no entry for a request.
    #[error("mock script: {0}")]
    Script(String),
}

impl GatewayError {
    fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport(_) | GatewayError::RateLimited(_))
    }

    /// True for failures of the endpoint itself rather than of one response.
    pub fn is_endpoint_failure(&self) -> bool {
        matches!(self, GatewayError::Transport(_) | GatewayError::RateLimited(_) | GatewayError::Auth(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmRole {
    Extractor,
    Rewriter,
    Scorer,
    Judge,
}

impl LlmRole {
    pub const ALL: [LlmRole; 4] = [LlmRole::Extractor, LlmRole::Rewriter, LlmRole::Scorer, LlmRole::Judge];

    pub fn as_str(self) -> &'static str {
        match self {
            LlmRole::Extractor => "extractor",
            LlmRole::Rewriter => "rewriter",
            LlmRole::Scorer => "scorer",
            LlmRole::Judge => "judge",
        }
    }

    /// Sampling temperature used when the endpoint config does not set one.
    pub fn default_temperature(self) -> f64 {
        match self {
            LlmRole::Rewriter => 0.8,
            _ => 0.2,
        }
    }
}

impl fmt::Display for LlmRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: MessageRole::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: MessageRole::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: MessageRole::Assistant, content: content.into() }
    }
}

fn default_retries() -> u32 {
    3
}
fn default_timeout() -> f64 {
    120.0
}
fn default_inflight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key. Empty means the
    /// endpoint needs no key.
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Per-request timeout in seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
    #[serde(default)]
    pub temperature: Option<f64>,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: String::new(),
            max_retries: default_retries(),
            timeout: default_timeout(),
            max_inflight: default_inflight(),
            temperature: None,
        }
    }

    /// Placeholder used when every role is served by a mock.
    pub fn mock() -> Self {
        EndpointConfig::new("mock://local", "mock")
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_inflight < 1 {
            return Err(GatewayError::InvalidRequest("max_inflight must be at least 1".into()));
        }
        if self.timeout.is_nan() || self.timeout <= 0.0 {
            return Err(GatewayError::InvalidRequest("timeout must be positive".into()));
        }
        if self.base_url.is_empty() || self.model_name.is_empty() {
            return Err(GatewayError::InvalidRequest("base_url and model_name are required".into()));
        }
        Ok(())
    }

    /// Reads the API key from the configured environment variable.
    pub fn api_key(&self) -> Result<Option<String>, GatewayError> {
        if self.api_key_env.is_empty() {
            return Ok(None);
        }
        match std::env::var(&self.api_key_env) {
            Ok(key) if !key.is_empty() => Ok(Some(key)),
            _ => Err(GatewayError::Auth(format!("environment variable {} is not set", self.api_key_env))),
        }
    }
}

/// Mean per-token negative log-likelihood of a continuation. Perplexity is
/// `exp(avg_nll)`; selection only ever needs the argmin, so it is not formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub avg_nll: f64,
    pub token_count: usize,
}

impl ScoreResult {
    pub fn new(avg_nll: f64, token_count: usize) -> Result<Self, GatewayError> {
        if !avg_nll.is_finite() || avg_nll < 0.0 || token_count == 0 {
            return Err(GatewayError::MalformedResponse(format!(
                "invalid score avg_nll={avg_nll} token_count={token_count}"
            )));
        }
        Ok(ScoreResult { avg_nll, token_count })
    }

    pub fn perplexity(&self) -> f64 {
        self.avg_nll.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ActionSummary,
    InfoLink,
    Rewrite,
    Score,
    Judge,
    Adhoc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeSubject {
    pub prediction: String,
    pub gold: String,
}

/// Structured description of why a request is made. Real transports ignore
/// it; the mock uses it to pick a scripted response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestTag {
    pub role: LlmRole,
    pub phase: Phase,
    pub trajectory_id: String,
    pub step: Option<u32>,
    pub run: Option<u32>,
    pub candidate: Option<u32>,
    pub repair: bool,
    pub judge: Option<JudgeSubject>,
}

impl RequestTag {
    pub fn new(role: LlmRole, phase: Phase, trajectory_id: impl Into<String>) -> Self {
        RequestTag {
            role,
            phase,
            trajectory_id: trajectory_id.into(),
            step: None,
            run: None,
            candidate: None,
            repair: false,
            judge: None,
        }
    }

    pub fn step(mut self, step: u32) -> Self {
        self.step = Some(step);
        self
    }

    pub fn run(mut self, run: u32) -> Self {
        self.run = Some(run);
        self
    }

    pub fn candidate(mut self, candidate: u32) -> Self {
        self.candidate = Some(candidate);
        self
    }
}

pub struct ChatRequest<'a> {
    pub messages: &'a [ChatMessage],
    pub temperature: f64,
    pub tag: &'a RequestTag,
}

pub struct ScoreRequest<'a> {
    pub prefix: &'a str,
    pub continuation: &'a str,
    pub tag: &'a RequestTag,
}

/// One attempt at a model call. Retries and concurrency limits live in
/// [`Endpoint`].
pub trait Transport: Send + Sync {
    fn chat(&self, cfg: &EndpointConfig, req: &ChatRequest<'_>) -> Result<String, GatewayError>;
    fn score(&self, cfg: &EndpointConfig, req: &ScoreRequest<'_>) -> Result<ScoreResult, GatewayError>;
}

/// Exponential backoff with multiplicative jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub factor: f64,
    /// Relative jitter; 0.2 means each delay is scaled by a factor in [0.8, 1.2].
    pub jitter: f64,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff { base: Duration::from_secs(1), factor: 2.0, jitter: 0.2 }
    }
}

impl Backoff {
    pub fn none() -> Self {
        Backoff { base: Duration::ZERO, factor: 1.0, jitter: 0.0 }
    }

    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let nominal = self.base.as_secs_f64() * self.factor.powi(retry as i32);
        let scale = if self.jitter > 0.0 {
            rand::rng().random_range(1.0 - self.jitter..=1.0 + self.jitter)
        } else {
            1.0
        };
        Duration::from_secs_f64((nominal * scale).max(0.0))
    }
}

struct Inflight {
    limit: usize,
    current: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

struct InflightGuard<'a>(&'a Inflight);

impl Inflight {
    fn new(limit: usize) -> Self {
        Inflight { limit, current: Mutex::new(0), freed: Condvar::new(), peak: AtomicUsize::new(0) }
    }

    fn acquire(&self) -> InflightGuard<'_> {
        let mut current = self.current.lock().unwrap();
        while *current >= self.limit {
            current = self.freed.wait(current).unwrap();
        }
        *current += 1;
        self.peak.fetch_max(*current, Ordering::SeqCst);
        InflightGuard(self)
    }
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        let mut current = self.0.current.lock().unwrap();
        *current -= 1;
        self.0.freed.notify_one();
    }
}

/// Call accounting for one endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct EndpointStats {
    /// Logical calls (one per `complete`/`score_logprob` invocation).
    pub calls: u64,
    /// Transport attempts including retries.
    pub attempts: u64,
    /// Highest number of simultaneous in-flight attempts observed.
    pub peak_inflight: usize,
}

pub struct Endpoint {
    role: LlmRole,
    cfg: EndpointConfig,
    transport: Arc<dyn Transport>,
    backoff: Backoff,
    inflight: Inflight,
    calls: AtomicU64,
    attempts: AtomicU64,
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Endpoint").field("role", &self.role).field("cfg", &self.cfg).finish()
    }
}

impl Endpoint {
    pub fn new(role: LlmRole, cfg: EndpointConfig, transport: Arc<dyn Transport>) -> Result<Self, GatewayError> {
        cfg.validate()?;
        Ok(Endpoint {
            role,
            inflight: Inflight::new(cfg.max_inflight),
            cfg,
            transport,
            backoff: Backoff::default(),
            calls: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
        })
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn role(&self) -> LlmRole {
        self.role
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn temperature(&self) -> f64 {
        self.cfg.temperature.unwrap_or_else(|| self.role.default_temperature())
    }

    pub fn stats(&self) -> EndpointStats {
        EndpointStats {
            calls: self.calls.load(Ordering::SeqCst),
            attempts: self.attempts.load(Ordering::SeqCst),
            peak_inflight: self.inflight.peak.load(Ordering::SeqCst),
        }
    }

    fn with_retries<T>(&self, mut attempt: impl FnMut() -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut retry = 0;
        loop {
            self.attempts.fetch_add(1, Ordering::SeqCst);
            let result = {
                let _slot = self.inflight.acquire();
                attempt()
            };
            match result {
                Err(e) if e.is_retryable() => {
                    if retry >= self.cfg.max_retries {
                        return Err(GatewayError::Transport(format!(
                            "{} endpoint failed after {} attempts: {e}",
                            self.role,
                            retry + 1
                        )));
                    }
                    log::debug!("{} attempt {} failed: {e}; retrying", self.role, retry + 1);
                    std::thread::sleep(self.backoff.delay(retry));
                    retry += 1;
                }
                other => return other,
            }
        }
    }

    /// Sends a chat request and returns the assistant text.
    pub fn complete(
        &self,
        messages: &[ChatMessage],
        temperature: f64,
        tag: &RequestTag,
    ) -> Result<String, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if let Some(m) = messages.iter().find(|m| m.role != MessageRole::System && m.content.is_empty()) {
            return Err(GatewayError::InvalidRequest(format!("empty {:?} message", m.role)));
        }
        let req = ChatRequest { messages, temperature, tag };
        self.with_retries(|| self.transport.chat(&self.cfg, &req))
    }

    /// Chat call whose reply must contain a fenced JSON block decoding to `T`.
    /// A malformed reply triggers one repair prompt before giving up.
    pub fn complete_json<T: DeserializeOwned>(
        &self,
        messages: &[ChatMessage],
        temperature: f64,
        tag: &RequestTag,
    ) -> Result<T, GatewayError> {
        let reply = self.complete(messages, temperature, tag)?;
        match decode_fenced::<T>(&reply) {
            Ok(v) => Ok(v),
            Err(first) => {
                log::debug!("{} reply malformed ({first}); sending repair prompt", self.role);
                let mut repaired = messages.to_vec();
                repaired.push(ChatMessage::assistant(if reply.is_empty() { " ".to_string() } else { reply }));
                repaired.push(ChatMessage::user(format!(
                    "Your previous reply could not be used: {first}. Reply again with only a single \
                     ```json fenced block that follows the requested format."
                )));
                let tag = RequestTag { repair: true, ..tag.clone() };
                let reply = self.complete(&repaired, temperature, &tag)?;
                decode_fenced::<T>(&reply).map_err(GatewayError::MalformedResponse)
            }
        }
    }

    /// Mean NLL of `continuation` conditioned on `prefix`.
    pub fn score_logprob(&self, prefix: &str, continuation: &str, tag: &RequestTag) -> Result<ScoreResult, GatewayError> {
        if continuation.is_empty() {
            return Err(GatewayError::InvalidRequest("continuation must be non-empty".into()));
        }
        let req = ScoreRequest { prefix, continuation, tag };
        self.with_retries(|| self.transport.score(&self.cfg, &req))
    }
}

fn decode_fenced<T: DeserializeOwned>(reply: &str) -> Result<T, String> {
    let body = extract_fenced_json(reply).ok_or_else(|| "no fenced JSON block".to_string())?;
    serde_json::from_str(body).map_err(|e| format!("JSON does not match the expected shape: {e}"))
}

#[derive(Debug, Deserialize)]
struct Verdict {
    verdict: serde_json::Value,
}

/// The four role endpoints plus the prompt templates they are driven with.
pub struct Gateway {
    pub extractor: Endpoint,
    pub rewriter: Endpoint,
    pub scorer: Endpoint,
    pub judge: Endpoint,
    pub prompts: PromptSet,
}

impl Gateway {
    /// Every role served by one transport with the same config.
    pub fn uniform(cfg: EndpointConfig, transport: Arc<dyn Transport>) -> Result<Self, GatewayError> {
        let ep = |role| Endpoint::new(role, cfg.clone(), transport.clone());
        Ok(Gateway {
            extractor: ep(LlmRole::Extractor)?,
            rewriter: ep(LlmRole::Rewriter)?,
            scorer: ep(LlmRole::Scorer)?,
            judge: ep(LlmRole::Judge)?,
            prompts: PromptSet::default(),
        })
    }

    /// A gateway whose every role is answered by `script`.
    pub fn mock(script: MockScript) -> Result<(Self, Arc<MockTransport>), GatewayError> {
        let transport = Arc::new(MockTransport::new(script));
        let gw = Gateway::uniform(EndpointConfig::mock(), transport.clone())?.with_backoff(Backoff::none());
        Ok((gw, transport))
    }

    pub fn with_backoff(self, backoff: Backoff) -> Self {
        Gateway {
            extractor: self.extractor.with_backoff(backoff),
            rewriter: self.rewriter.with_backoff(backoff),
            scorer: self.scorer.with_backoff(backoff),
            judge: self.judge.with_backoff(backoff),
            prompts: self.prompts,
        }
    }

    pub fn with_prompts(mut self, prompts: PromptSet) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn endpoint(&self, role: LlmRole) -> &Endpoint {
        match role {
            LlmRole::Extractor => &self.extractor,
            LlmRole::Rewriter => &self.rewriter,
            LlmRole::Scorer => &self.scorer,
            LlmRole::Judge => &self.judge,
        }
    }

    /// Asks the judge whether `prediction` answers `question` equivalently to `gold`.
    pub fn judge_answer(
        &self,
        question: &str,
        prediction: &str,
        gold: &str,
        trajectory_id: &str,
    ) -> Result<bool, GatewayError> {
        if question.is_empty() || prediction.is_empty() || gold.is_empty() {
            return Err(GatewayError::InvalidRequest("judge inputs must be non-empty".into()));
        }
        let prompt = self
            .prompts
            .judge
            .render(&[("question", question), ("prediction", prediction), ("gold", gold)]);
        let mut tag = RequestTag::new(LlmRole::Judge, Phase::Judge, trajectory_id);
        tag.judge = Some(JudgeSubject { prediction: prediction.into(), gold: gold.into() });
        let messages = [ChatMessage::user(prompt)];
        let temperature = self.judge.temperature();
        let verdict: Verdict = self.judge.complete_json(&messages, temperature, &tag)?;
        parse_verdict(&verdict.verdict).ok_or_else(|| {
            GatewayError::MalformedResponse(format!("verdict {} is not yes/no", verdict.verdict))
        })
    }
}

fn parse_verdict(v: &serde_json::Value) -> Option<bool> {
    match v {
        serde_json::Value::Bool(b) => Some(*b),
        serde_json::Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "yes" | "true" | "correct" => Some(true),
            "no" | "false" | "incorrect" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    fn tag() -> RequestTag {
        RequestTag::new(LlmRole::Extractor, Phase::Adhoc, "t")
    }

    fn endpoint(script: MockScript, max_retries: u32) -> (Endpoint, Arc<MockTransport>) {
        let mock = Arc::new(MockTransport::new(script));
        let mut cfg = EndpointConfig::mock();
        cfg.max_retries = max_retries;
        let ep = Endpoint::new(LlmRole::Extractor, cfg, mock.clone()).unwrap().with_backoff(Backoff::none());
        (ep, mock)
    }

    fn fail(times: u32) -> MockRule {
        MockRule { when: Matcher::default(), respond: MockResponse::Fail(FailureKind::Transport), times: Some(times) }
    }

    #[test]
    fn echo_returns_last_user_message() {
        let script = MockScript::keyed(vec![MockRule::always(Matcher::default(), MockResponse::Echo)]);
        let (ep, _) = endpoint(script, 0);
        let msgs = [ChatMessage::system("sys"), ChatMessage::user("first"), ChatMessage::user("hello there")];
        assert_eq!(ep.complete(&msgs, 0.2, &tag()).unwrap(), "hello there");
    }

    #[test]
    fn retries_until_success() {
        let script = MockScript::keyed(vec![fail(2), MockRule::always(Matcher::default(), MockResponse::Text("ok".into()))]);
        let (ep, _) = endpoint(script, 3);
        assert_eq!(ep.complete(&[ChatMessage::user("x")], 0.2, &tag()).unwrap(), "ok");
        assert_eq!(ep.stats().attempts, 3);
        assert_eq!(ep.stats().calls, 1);
    }

    #[test]
    fn retry_exhaustion_is_a_transport_error() {
        let script = MockScript::keyed(vec![fail(4), MockRule::always(Matcher::default(), MockResponse::Text("ok".into()))]);
        let (ep, _) = endpoint(script, 3);
        let err = ep.complete(&[ChatMessage::user("x")], 0.2, &tag()).unwrap_err();
        assert!(matches!(err, GatewayError::Transport(_)), "{err}");
        assert_eq!(ep.stats().attempts, 4);
    }

    #[test]
    fn rate_limits_are_retried_but_auth_is_not() {
        let rl = MockRule {
            when: Matcher::default(),
            respond: MockResponse::Fail(FailureKind::RateLimit),
            times: Some(1),
        };
        let script = MockScript::keyed(vec![rl, MockRule::always(Matcher::default(), MockResponse::Text("ok".into()))]);
        let (ep, _) = endpoint(script, 1);
        assert_eq!(ep.complete(&[ChatMessage::user("x")], 0.2, &tag()).unwrap(), "ok");

        let script = MockScript::keyed(vec![MockRule::always(Matcher::default(), MockResponse::Fail(FailureKind::Auth))]);
        let (ep, _) = endpoint(script, 5);
        assert!(matches!(ep.complete(&[ChatMessage::user("x")], 0.2, &tag()), Err(GatewayError::Auth(_))));
        assert_eq!(ep.stats().attempts, 1);
    }

    #[test]
    fn fenced_json_gets_one_repair() {
        let bad = MockRule { when: Matcher { repair: Some(false), ..Default::default() }, respond: MockResponse::Text("nope".into()), times: None };
        let good = MockRule::always(
            Matcher { repair: Some(true), ..Default::default() },
            MockResponse::Json(serde_json::json!({"verdict": "yes"})),
        );
        let (ep, mock) = endpoint(MockScript::keyed(vec![bad.clone(), good]), 0);
        let v: Verdict = ep.complete_json(&[ChatMessage::user("x")], 0.2, &tag()).unwrap();
        assert_eq!(parse_verdict(&v.verdict), Some(true));
        assert_eq!(mock.requests().len(), 2);

        let (ep, _) = endpoint(MockScript::keyed(vec![MockRule { when: Matcher::default(), ..bad }]), 0);
        let err = ep.complete_json::<Verdict>(&[ChatMessage::user("x")], 0.2, &tag()).unwrap_err();
        assert!(matches!(err, GatewayError::MalformedResponse(_)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EndpointConfig::mock();
        cfg.max_inflight = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = EndpointConfig::mock();
        cfg.api_key_env = "TRAJCLIP_TEST_SURELY_UNSET_VAR".into();
        assert!(matches!(cfg.api_key(), Err(GatewayError::Auth(_))));
    }

    #[test]
    fn inflight_cap_is_respected() {
        let script = MockScript::keyed(vec![MockRule::always(Matcher::default(), MockResponse::Text("ok".into()))]);
        let mock = Arc::new(MockTransport::new(script).with_latency(Duration::from_millis(20)));
        let mut cfg = EndpointConfig::mock();
        cfg.max_inflight = 2;
        let ep = Endpoint::new(LlmRole::Rewriter, cfg, mock.clone()).unwrap();
        thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| ep.complete(&[ChatMessage::user("x")], 0.8, &tag()).unwrap());
            }
        });
        assert_eq!(ep.stats().calls, 8);
        assert!(ep.stats().peak_inflight <= 2);
        assert!(mock.peak_concurrency() <= 2);
        assert!(mock.peak_concurrency() >= 1);
    }

    #[test]
    fn judge_verdicts() {
        let (gw, _) = Gateway::mock(MockScript::keyed(vec![])).unwrap();
        assert!(gw.judge_answer("q?", "17000", "17000", "t").unwrap());
        assert!(!gw.judge_answer("q?", "16000", "17000", "t").unwrap());

        let scripted = MockRule::always(
            Matcher { role: Some(LlmRole::Judge), ..Default::default() },
            MockResponse::Json(serde_json::json!({"verdict": "yes"})),
        );
        let (gw, _) = Gateway::mock(MockScript::keyed(vec![scripted])).unwrap();
        assert!(gw.judge_answer("How many thousand hours?", "17 thousand hours", "17000", "t").unwrap());

        let maybe = MockRule::always(Matcher::default(), MockResponse::Json(serde_json::json!({"verdict": "maybe"})));
        let (gw, _) = Gateway::mock(MockScript::keyed(vec![maybe])).unwrap();
        assert!(matches!(gw.judge_answer("q", "a", "b", "t"), Err(GatewayError::MalformedResponse(_))));
    }

    #[test]
    fn backoff_schedule() {
        let b = Backoff { base: Duration::from_secs(1), factor: 2.0, jitter: 0.2 };
        for retry in 0..4 {
            let d = b.delay(retry).as_secs_f64();
            let nominal = 2f64.powi(retry as i32);
            assert!(d >= nominal * 0.8 - 1e-9 && d <= nominal * 1.2 + 1e-9, "{d}");
        }
    }
}
