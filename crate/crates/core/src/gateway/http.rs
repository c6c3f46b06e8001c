//! Chat-completions HTTP transport.
//!
//! Chat: `POST {base_url}/chat/completions` with `{"model","messages","temperature"}`.
//! Scoring: `POST {base_url}/completions` with `echo: true` and `logprobs`, the
//! legacy completions facility exposed by vLLM and similar servers. Token
//! log-probabilities whose text offsets fall inside the continuation are
//! averaged.

use std::time::Duration;

use serde_json::{json, Value};
use ureq::Agent;

use super::{ChatRequest, EndpointConfig, GatewayError, ScoreRequest, ScoreResult, Transport};

pub struct HttpTransport {
    agent: Agent,
}

impl Default for HttpTransport {
    fn default() -> Self {
        HttpTransport::new()
    }
}

impl HttpTransport {
    pub fn new() -> Self {
        let agent = Agent::config_builder().http_status_as_error(false).build().into();
        HttpTransport { agent }
    }

    fn post(&self, cfg: &EndpointConfig, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let key = cfg.api_key()?;
        let url = format!("{}/{}", cfg.base_url.trim_end_matches('/'), path);
        let mut req = self
            .agent
            .post(&url)
            .config()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout)))
            .build()
            .header("Content-Type", "application/json");
        if let Some(key) = key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::Json(e) => GatewayError::InvalidRequest(e.to_string()),
            other => GatewayError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport(format!("reading response body: {e}")))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| GatewayError::MalformedResponse(format!("response is not JSON: {e}"))),
            401 | 403 => Err(GatewayError::Auth(format!("HTTP {status}: {}", clip(&text)))),
            429 => Err(GatewayError::RateLimited(format!("HTTP 429: {}", clip(&text)))),
            500..=599 => Err(GatewayError::Transport(format!("HTTP {status}: {}", clip(&text)))),
            _ => Err(GatewayError::InvalidRequest(format!("HTTP {status}: {}", clip(&text)))),
        }
    }
}

fn clip(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl Transport for HttpTransport {
    fn chat(&self, cfg: &EndpointConfig, req: &ChatRequest<'_>) -> Result<String, GatewayError> {
        let mut body = json!({
            "model": cfg.model_name,
            "messages": req.messages,
            "temperature": req.temperature,
        });
        // Rewrite candidates are sampled with distinct seeds.
        if let Some(c) = req.tag.candidate {
            body["seed"] = json!(c);
        }
        let resp = self.post(cfg, "chat/completions", &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| GatewayError::MalformedResponse("missing choices[0].message.content".into()))
    }

    fn score(&self, cfg: &EndpointConfig, req: &ScoreRequest<'_>) -> Result<ScoreResult, GatewayError> {
        let prompt = format!("{}{}", req.prefix, req.continuation);
        let body = json!({
            "model": cfg.model_name,
            "prompt": prompt,
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 0,
        });
        let resp = match self.post(cfg, "completions", &body) {
            Err(GatewayError::InvalidRequest(msg)) => return Err(GatewayError::UnsupportedEndpoint(msg)),
            other => other?,
        };
        let logprobs = resp
            .pointer("/choices/0/logprobs")
            .filter(|v| !v.is_null())
            .ok_or_else(|| GatewayError::UnsupportedEndpoint("response carries no logprobs".into()))?;
        continuation_nll(logprobs, req.prefix.chars().count(), prompt.chars().count())
    }
}

/// Mean NLL over echoed tokens starting in `[start, end)` (character offsets).
fn continuation_nll(logprobs: &Value, start: usize, end: usize) -> Result<ScoreResult, GatewayError> {
    let malformed = |m: &str| GatewayError::MalformedResponse(m.to_string());
    let lps = logprobs
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing token_logprobs"))?;
    let offsets = logprobs
        .get("text_offset")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing text_offset"))?;
    if lps.len() != offsets.len() {
        return Err(malformed("token_logprobs and text_offset differ in length"));
    }
    let mut total = 0.0;
    let mut n = 0;
    for (lp, off) in lps.iter().zip(offsets) {
        let off = off.as_u64().ok_or_else(|| malformed("non-integer text offset"))? as usize;
        if off < start || off >= end {
            continue;
        }
        let Some(lp) = lp.as_f64() else { continue };
        total -= lp;
        n += 1;
    }
    if n == 0 {
        return Err(malformed("no scored tokens inside the continuation"));
    }
    ScoreResult::new(total / n as f64, n)
}
