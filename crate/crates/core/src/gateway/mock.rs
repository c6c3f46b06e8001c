//! Scripted offline transport.
//!
//! A [`MockScript`] is an ordered list of `(matcher, response)` rules stored
//! as JSON. Two lookup modes exist:
//!
//! * `sequence`: rules are consumed in order. With `strict`, every request must
//!   match the next unconsumed rule; otherwise the first matching unconsumed
//!   rule is used.
//! * `keyed`: the first matching rule with uses left answers; `times: null`
//!   means unlimited. Lookups depend only on the request, so keyed scripts stay
//!   deterministic under concurrent callers.
//!
//! When no rule matches and the script is not strict, judge requests fall back
//! to normalized exact-match grading. Everything else is a [`GatewayError::Script`].
//!
//! Text responses may use the placeholders `{trajectory_id}`, `{step}`, `{run}`
//! and `{candidate}`, filled from the request tag.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    ChatRequest, EndpointConfig, GatewayError, LlmRole, MessageRole, Phase, RequestTag, ScoreRequest, ScoreResult,
    Transport,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockMode {
    Sequence,
    #[default]
    Keyed,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matcher {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<LlmRole>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair: Option<bool>,
    /// Substring that must occur in the last message (or the continuation
    /// for score requests).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
}

impl Matcher {
    fn matches(&self, tag: &RequestTag, text: &str) -> bool {
        fn eq<T: PartialEq>(want: &Option<T>, got: T) -> bool {
            want.as_ref().is_none_or(|w| *w == got)
        }
        fn eq_opt<T: PartialEq + Copy>(want: &Option<T>, got: Option<T>) -> bool {
            want.is_none() || *want == got
        }
        eq(&self.role, tag.role)
            && eq(&self.phase, tag.phase)
            && self.trajectory_id.as_deref().is_none_or(|id| id == tag.trajectory_id)
            && eq_opt(&self.step, tag.step)
            && eq_opt(&self.run, tag.run)
            && eq_opt(&self.candidate, tag.candidate)
            && eq(&self.repair, tag.repair)
            && self.contains.as_deref().is_none_or(|s| text.contains(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Transport,
    RateLimit,
    Auth,
    Unsupported,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockResponse {
    /// Raw assistant text.
    Text(String),
    /// A JSON value returned inside a ```json fence.
    Json(serde_json::Value),
    /// The content of the last user message.
    Echo,
    Score { avg_nll: f64, token_count: usize },
    Fail(FailureKind),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default)]
    pub when: Matcher,
    pub respond: MockResponse,
    /// Number of uses; `None` is unlimited (sequence rules are always single-use).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<u32>,
}

impl MockRule {
    pub fn always(when: Matcher, respond: MockResponse) -> Self {
        MockRule { when, respond, times: None }
    }

    pub fn once(when: Matcher, respond: MockResponse) -> Self {
        MockRule { when, respond, times: Some(1) }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub mode: MockMode,
    #[serde(default)]
    pub strict: bool,
    #[serde(default = "yes")]
    pub judge_exact_match: bool,
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn keyed(rules: Vec<MockRule>) -> Self {
        MockScript { mode: MockMode::Keyed, strict: false, judge_exact_match: true, rules }
    }

    pub fn sequence(rules: Vec<MockRule>, strict: bool) -> Self {
        MockScript { mode: MockMode::Sequence, strict, judge_exact_match: true, rules }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("mock script serializes")
    }

    /// Sequence scripts are order dependent; callers must not fan out.
    pub fn requires_sequential(&self) -> bool {
        self.mode == MockMode::Sequence
    }
}

/// One request as seen by the mock.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub tag: RequestTag,
    pub text: String,
    /// Conditioning prefix of a score request.
    pub prefix: Option<String>,
    pub rule: Option<usize>,
}

struct State {
    cursor: usize,
    remaining: Vec<Option<u32>>,
    log: Vec<RecordedRequest>,
}

pub struct MockTransport {
    script: MockScript,
    state: Mutex<State>,
    latency: Duration,
    active: AtomicUsize,
    peak: AtomicUsize,
}

impl MockTransport {
    pub fn new(script: MockScript) -> Self {
        let remaining = script
            .rules
            .iter()
            .map(|r| if script.mode == MockMode::Sequence { Some(1) } else { r.times })
            .collect();
        MockTransport {
            script,
            state: Mutex::new(State { cursor: 0, remaining, log: Vec::new() }),
            latency: Duration::ZERO,
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    /// Adds an artificial delay to every request (for concurrency tests).
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.lock().unwrap().log.clone()
    }

    pub fn request_count(&self, role: LlmRole) -> usize {
        self.state.lock().unwrap().log.iter().filter(|r| r.tag.role == role).count()
    }

    /// Most simultaneous requests observed inside the mock.
    pub fn peak_concurrency(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    fn lookup(&self, tag: &RequestTag, text: &str, prefix: Option<&str>) -> Result<Option<MockResponse>, GatewayError> {
        let mut st = self.state.lock().unwrap();
        let rules = &self.script.rules;
        let hit = match self.script.mode {
            MockMode::Sequence if self.script.strict => {
                let i = st.cursor;
                match rules.get(i) {
                    Some(rule) if rule.when.matches(tag, text) => Some(i),
                    Some(_) => {
                        return Err(GatewayError::Script(format!(
                            "request {:?} does not match script entry {i}",
                            short(tag)
                        )))
                    }
                    None => return Err(GatewayError::Script(format!("script exhausted at {:?}", short(tag)))),
                }
            }
            _ => (0..rules.len()).find(|&i| st.remaining[i] != Some(0) && rules[i].when.matches(tag, text)),
        };
        if let Some(i) = hit {
            if let Some(n) = st.remaining[i].as_mut() {
                *n -= 1;
            }
            if self.script.mode == MockMode::Sequence {
                st.cursor = st.cursor.max(i + 1);
            }
        }
        st.log.push(RecordedRequest { tag: tag.clone(), text: text.to_string(), prefix: prefix.map(str::to_string), rule: hit });
        Ok(hit.map(|i| rules[i].respond.clone()))
    }

    fn enter(&self) -> ActiveGuard<'_> {
        let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        ActiveGuard(&self.active)
    }
}

struct ActiveGuard<'a>(&'a AtomicUsize);

impl Drop for ActiveGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

fn short(tag: &RequestTag) -> String {
    format!(
        "{}/{:?}/{}/step={:?}/run={:?}/cand={:?}/repair={}",
        tag.role, tag.phase, tag.trajectory_id, tag.step, tag.run, tag.candidate, tag.repair
    )
}

fn fill(template: &str, tag: &RequestTag) -> String {
    let opt = |v: Option<u32>| v.map(|n| n.to_string()).unwrap_or_default();
    template
        .replace("{trajectory_id}", &tag.trajectory_id)
        .replace("{step}", &opt(tag.step))
        .replace("{run}", &opt(tag.run))
        .replace("{candidate}", &opt(tag.candidate))
}

fn failure(kind: FailureKind) -> GatewayError {
    let msg = "scripted failure".to_string();
    match kind {
        FailureKind::Transport => GatewayError::Transport(msg),
        FailureKind::RateLimit => GatewayError::RateLimited(msg),
        FailureKind::Auth => GatewayError::Auth(msg),
        FailureKind::Unsupported => GatewayError::UnsupportedEndpoint(msg),
        FailureKind::Malformed => GatewayError::MalformedResponse(msg),
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl Transport for MockTransport {
    fn chat(&self, _cfg: &EndpointConfig, req: &ChatRequest<'_>) -> Result<String, GatewayError> {
        let _active = self.enter();
        let last = req.messages.last().map(|m| m.content.as_str()).unwrap_or("");
        match self.lookup(req.tag, last, None)? {
            Some(MockResponse::Text(t)) => Ok(fill(&t, req.tag)),
            Some(MockResponse::Json(v)) => {
                let body = serde_json::to_string(&v).expect("json value serializes");
                Ok(format!("```json\n{}\n```", fill(&body, req.tag)))
            }
            Some(MockResponse::Echo) => Ok(req
                .messages
                .iter()
                .rev()
                .find(|m| m.role == MessageRole::User)
                .map(|m| m.content.clone())
                .unwrap_or_default()),
            Some(MockResponse::Fail(kind)) => Err(failure(kind)),
            Some(MockResponse::Score { .. }) => {
                Err(GatewayError::MalformedResponse("score response scripted for a chat request".into()))
            }
            None => match (&req.tag.judge, self.script.strict, self.script.judge_exact_match) {
                (Some(subject), false, true) => {
                    let verdict = if normalize(&subject.prediction) == normalize(&subject.gold) { "yes" } else { "no" };
                    Ok(format!("```json\n{{\"verdict\":\"{verdict}\"}}\n```"))
                }
                _ => Err(GatewayError::Script(format!("no rule for chat request {}", short(req.tag)))),
            },
        }
    }

    fn score(&self, _cfg: &EndpointConfig, req: &ScoreRequest<'_>) -> Result<ScoreResult, GatewayError> {
        let _active = self.enter();
        match self.lookup(req.tag, req.continuation, Some(req.prefix))? {
            Some(MockResponse::Score { avg_nll, token_count }) => ScoreResult::new(avg_nll, token_count),
            Some(MockResponse::Fail(kind)) => Err(failure(kind)),
            Some(_) => Err(GatewayError::MalformedResponse("non-score response scripted for a score request".into())),
            None => Err(GatewayError::Script(format!("no rule for score request {}", short(req.tag)))),
        }
    }
}
