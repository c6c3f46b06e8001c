use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};
use trajclip::gateway::{
    Backoff, ChatMessage, Endpoint, EndpointConfig, GatewayError, HttpTransport, LlmRole, Phase, RequestTag,
};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    authorization: Option<String>,
    body: Value,
}

/// Serves the canned `(status, body)` replies in order, one per connection.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let path = request_line.split_whitespace().nth(1).unwrap_or_default().to_string();
            let mut len = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            log.lock().unwrap().push(Seen { path, authorization, body: serde_json::from_slice(&body).unwrap() });
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (base, seen)
}

fn endpoint(role: LlmRole, base: &str, retries: u32) -> Endpoint {
    let cfg = EndpointConfig { max_retries: retries, timeout: 10.0, ..EndpointConfig::new(base, "test-model") };
    Endpoint::new(role, cfg, Arc::new(HttpTransport::new())).unwrap().with_backoff(Backoff::none())
}

fn chat_reply(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

#[test]
fn chat_posts_messages_and_returns_content() {
    let (base, seen) = serve(vec![(200, chat_reply("hello back"))]);
    let ep = endpoint(LlmRole::Extractor, &base, 0);
    let tag = RequestTag::new(LlmRole::Extractor, Phase::Adhoc, "t1");
    let reply = ep.complete(&[ChatMessage::system("sys"), ChatMessage::user("hi")], 0.0, &tag).unwrap();
    assert_eq!(reply, "hello back");
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].body["model"], "test-model");
    assert_eq!(seen[0].body["messages"][1]["content"], "hi");
    assert_eq!(seen[0].body["temperature"], 0.0);
    assert!(seen[0].body.get("seed").is_none());
    assert!(seen[0].authorization.is_none());
}

#[test]
fn rewrite_candidates_carry_their_seed() {
    let (base, seen) = serve(vec![(200, chat_reply("x"))]);
    let ep = endpoint(LlmRole::Rewriter, &base, 0);
    let tag = RequestTag::new(LlmRole::Rewriter, Phase::Rewrite, "t1").candidate(2);
    ep.complete(&[ChatMessage::user("rewrite")], 0.8, &tag).unwrap();
    assert_eq!(seen.lock().unwrap()[0].body["seed"], 2);
}

#[test]
fn api_key_is_sent_as_bearer_token() {
    std::env::set_var("CLIP_HTTP_TEST_KEY", "sekret");
    let (base, seen) = serve(vec![(200, chat_reply("ok"))]);
    let cfg = EndpointConfig { api_key_env: "CLIP_HTTP_TEST_KEY".into(), ..EndpointConfig::new(&base, "m") };
    let ep = Endpoint::new(LlmRole::Judge, cfg, Arc::new(HttpTransport::new())).unwrap();
    ep.complete(&[ChatMessage::user("q")], 0.0, &RequestTag::new(LlmRole::Judge, Phase::Judge, "t")).unwrap();
    assert_eq!(seen.lock().unwrap()[0].authorization.as_deref(), Some("Bearer sekret"));
}

#[test]
fn score_averages_continuation_logprobs() {
    let reply = json!({"choices": [{"text": "", "logprobs": {
        "tokens": ["ab", "cd", "ef", "!"],
        "token_logprobs": [null, -2.0, -1.0, -7.0],
        "text_offset": [0, 2, 4, 6]
    }}]});
    let (base, seen) = serve(vec![(200, reply.to_string())]);
    let ep = endpoint(LlmRole::Scorer, &base, 0);
    let r = ep.score_logprob("ab", "cdef", &RequestTag::new(LlmRole::Scorer, Phase::Score, "t")).unwrap();
    assert_eq!(r.token_count, 2);
    assert!((r.avg_nll - 1.5).abs() < 1e-12);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].path, "/v1/completions");
    assert_eq!(seen[0].body["prompt"], "abcdef");
    assert_eq!(seen[0].body["echo"], true);
}

#[test]
fn unauthorized_is_not_retried() {
    let (base, seen) = serve(vec![(401, "{\"error\":\"bad key\"}".into())]);
    let ep = endpoint(LlmRole::Extractor, &base, 3);
    let err = ep.complete(&[ChatMessage::user("q")], 0.0, &RequestTag::new(LlmRole::Extractor, Phase::Adhoc, "t"));
    assert!(matches!(err, Err(GatewayError::Auth(_))), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn rate_limits_are_retried() {
    let (base, seen) = serve(vec![(429, "{}".into()), (503, "{}".into()), (200, chat_reply("finally"))]);
    let ep = endpoint(LlmRole::Extractor, &base, 3);
    let reply = ep.complete(&[ChatMessage::user("q")], 0.0, &RequestTag::new(LlmRole::Extractor, Phase::Adhoc, "t"));
    assert_eq!(reply.unwrap(), "finally");
    assert_eq!(seen.lock().unwrap().len(), 3);
    assert_eq!(ep.stats().attempts, 3);
}

#[test]
fn retries_are_bounded() {
    let (base, _) = serve(vec![(429, "{}".into()), (429, "{}".into())]);
    let ep = endpoint(LlmRole::Extractor, &base, 1);
    let err = ep.complete(&[ChatMessage::user("q")], 0.0, &RequestTag::new(LlmRole::Extractor, Phase::Adhoc, "t"));
    assert!(matches!(err, Err(GatewayError::Transport(ref m)) if m.contains("after 2 attempts")), "{err:?}");
}

#[test]
fn scoring_rejected_by_the_server_is_unsupported() {
    let (base, _) = serve(vec![(400, "{\"error\":\"echo not supported\"}".into())]);
    let ep = endpoint(LlmRole::Scorer, &base, 2);
    let err = ep.score_logprob("a", "b", &RequestTag::new(LlmRole::Scorer, Phase::Score, "t"));
    assert!(matches!(err, Err(GatewayError::UnsupportedEndpoint(_))), "{err:?}");
}

#[test]
fn missing_logprobs_is_unsupported() {
    let (base, _) = serve(vec![(200, json!({"choices": [{"text": "x"}]}).to_string())]);
    let ep = endpoint(LlmRole::Scorer, &base, 0);
    let err = ep.score_logprob("a", "b", &RequestTag::new(LlmRole::Scorer, Phase::Score, "t"));
    assert!(matches!(err, Err(GatewayError::UnsupportedEndpoint(_))), "{err:?}");
}

#[test]
fn non_json_success_is_malformed() {
    let (base, _) = serve(vec![(200, "not json".into())]);
    let ep = endpoint(LlmRole::Extractor, &base, 0);
    let err = ep.complete(&[ChatMessage::user("q")], 0.0, &RequestTag::new(LlmRole::Extractor, Phase::Adhoc, "t"));
    assert!(matches!(err, Err(GatewayError::MalformedResponse(_))), "{err:?}");
}
