//! Chat and remote-embedding clients against scripted local HTTP servers.

use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use plp_core::captiongen::{
    CaptionClient, CaptionError, ChatBackend, ChatRequest, FakeClock, HttpChatClient, LlmConfig, Message,
    ResponseFormat, TransportError,
};
use plp_core::embedder::{write_mock_png, EmbedError, EmbeddingBackend, RemoteBackend};
use plp_core::ProbeImage;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Recorded {
    path: String,
    authorization: Option<String>,
    body: Value,
}

struct Stub {
    url: String,
    seen: Arc<Mutex<Vec<Recorded>>>,
    thread: JoinHandle<()>,
}

impl Stub {
    /// Answers each incoming request with the next `(status, body)` in turn.
    fn serve(script: Vec<(u16, String)>) -> Self {
        let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
        let url = format!("http://{}", server.server_addr().to_ip().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        let thread = std::thread::spawn(move || {
            for (status, body) in script {
                let mut req = server.recv().unwrap();
                let mut text = String::new();
                req.as_reader().read_to_string(&mut text).unwrap();
                log.lock().unwrap().push(Recorded {
                    path: req.url().to_string(),
                    authorization: req
                        .headers()
                        .iter()
                        .find(|h| h.field.equiv("Authorization"))
                        .map(|h| h.value.to_string()),
                    body: serde_json::from_str(&text).unwrap_or(Value::Null),
                });
                let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
                req.respond(
                    tiny_http::Response::from_string(body)
                        .with_status_code(status)
                        .with_header(header),
                )
                .unwrap();
            }
        });
        Self { url, seen, thread }
    }

    fn finish(self) -> Vec<Recorded> {
        self.thread.join().unwrap();
        Arc::try_unwrap(self.seen).unwrap().into_inner().unwrap()
    }
}

fn completion(content: &str) -> String {
    json!({"choices": [{"message": {"content": content}, "finish_reason": "stop"}]}).to_string()
}

fn request() -> ChatRequest {
    ChatRequest {
        model: "m".into(),
        messages: vec![Message::user_text("hello")],
        temperature: 0.2,
        response_format: ResponseFormat::json_object(),
    }
}

fn http_client(stub: &Stub, max_retries: u32) -> CaptionClient {
    let cfg = LlmConfig {
        base_url: stub.url.clone(),
        model_name: "test-model".into(),
        max_retries,
        retry_backoff_ms: 10,
        ..LlmConfig::default()
    };
    let backend = Arc::new(HttpChatClient::new(&stub.url, "sekret".into(), Duration::from_secs(5)));
    CaptionClient::new(cfg, backend, Arc::new(FakeClock::new())).unwrap()
}

fn probe() -> ProbeImage {
    ProbeImage {
        dataset_id: "d".into(),
        class_label: "heron".into(),
        image_ref: "heron.png".into(),
        selection_seed: 42,
    }
}

#[test]
fn chat_request_carries_bearer_token_and_openai_body() {
    let stub = Stub::serve(vec![(200, completion("{\"caption\": \"x\"}"))]);
    let client = HttpChatClient::new(&format!("{}/", stub.url), "sekret".into(), Duration::from_secs(5));
    let reply = client.complete(&request()).unwrap();
    assert_eq!(reply.content.as_deref(), Some("{\"caption\": \"x\"}"));
    assert_eq!(reply.finish_reason.as_deref(), Some("stop"));
    let seen = stub.finish();
    assert_eq!(seen[0].path, "/chat/completions");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer sekret"));
    assert_eq!(seen[0].body["model"], "m");
    assert_eq!(seen[0].body["response_format"]["type"], "json_object");
    assert_eq!(seen[0].body["messages"][0]["role"], "user");
}

#[test]
fn status_codes_map_to_transport_errors() {
    let stub = Stub::serve(vec![(429, "slow down".into()), (400, "bad".into()), (200, "not json".into())]);
    let client = HttpChatClient::new(&stub.url, "k".into(), Duration::from_secs(5));
    let e = client.complete(&request()).unwrap_err();
    assert!(e.is_transient(), "{e}");
    let e = client.complete(&request()).unwrap_err();
    assert_eq!(e, TransportError::Status { status: 400, body: "bad".into() });
    assert!(matches!(client.complete(&request()), Err(TransportError::Decode(_))));
    stub.finish();
}

#[test]
fn server_error_is_retried_then_caption_parsed() {
    let stub = Stub::serve(vec![
        (503, "busy".into()),
        (200, completion("I think it is a bird.")),
        (200, completion("{\"caption\": \"A grey heron standing in shallow water.\"}")),
    ]);
    let client = http_client(&stub, 2);
    let caption = client
        .generate_plausible_caption(&probe(), &write_mock_png("heron", 0))
        .unwrap();
    assert_eq!(caption, "A grey heron standing in shallow water.");
    assert_eq!(client.calls(), 3);
    let seen = stub.finish();
    let content = &seen[2].body["messages"][1]["content"];
    assert!(content.to_string().contains("data:image/jpeg;base64,"), "{content}");
}

#[test]
fn persistent_outage_exhausts_retries() {
    let stub = Stub::serve(vec![(502, "down".into()), (502, "down".into())]);
    let client = http_client(&stub, 1);
    let e = client
        .generate_plausible_caption(&probe(), &write_mock_png("heron", 0))
        .unwrap_err();
    assert!(matches!(e, CaptionError::LlmUnavailable { attempts: 2, .. }), "{e}");
    stub.finish();
}

#[test]
fn counterfactuals_over_http() {
    let reply = json!({"counterfactuals": ["an egret", "a stork", "a crane"]}).to_string();
    let stub = Stub::serve(vec![(200, completion(&reply))]);
    let client = http_client(&stub, 0);
    let cfs = client
        .generate_counterfactuals("A grey heron.", "heron", &["egret".into(), "stork".into()], 3)
        .unwrap();
    assert_eq!(cfs, ["an egret", "a stork", "a crane"]);
    let seen = stub.finish();
    let prompt = seen[0].body["messages"].to_string();
    assert!(prompt.contains("egret") && prompt.contains("A grey heron."), "{prompt}");
}

fn embed_reply(vectors: Value, dim: usize) -> String {
    json!({"dim": dim, "vectors": vectors}).to_string()
}

#[test]
fn remote_backend_probes_dim_and_embeds() {
    let stub = Stub::serve(vec![
        (200, embed_reply(json!([[1.0, 0.0, 0.0]]), 3)),
        (200, embed_reply(json!([[0.0, 1.0, 0.0], [0.0, 3.0, 4.0]]), 3)),
        (200, embed_reply(json!([[0.6, 0.8, 0.0]]), 3)),
    ]);
    let backend = RemoteBackend::connect(&stub.url, Duration::from_secs(5)).unwrap();
    assert_eq!(backend.descriptor().dim, 3);
    let t = backend.embed_texts(&["a", "b"]).unwrap();
    assert_eq!(t[0].as_slice(), &[0.0, 1.0, 0.0]);
    // non-unit replies are re-normalized
    assert_eq!(t[1].as_slice(), &[0.0, 0.6, 0.8]);
    let i = backend.embed_images(&[&[1u8, 2, 3][..]]).unwrap();
    assert_eq!(i[0].as_slice(), &[0.6, 0.8, 0.0]);
    let seen = stub.finish();
    assert_eq!(seen[0].path, "/embed/text");
    assert_eq!(seen[1].body, json!({"texts": ["a", "b"]}));
    assert_eq!(seen[2].path, "/embed/image");
    assert_eq!(seen[2].body, json!({"images_b64": ["AQID"]}));
}

#[test]
fn remote_backend_rejects_bad_replies() {
    let stub = Stub::serve(vec![
        (200, embed_reply(json!([[1.0, 0.0]]), 2)),
        (200, embed_reply(json!([[1.0, 0.0, 0.0]]), 3)),
        (200, embed_reply(json!([[1.0, 0.0]]), 2)),
        (503, "overloaded".into()),
    ]);
    let backend = RemoteBackend::connect(&stub.url, Duration::from_secs(5)).unwrap();
    assert!(matches!(
        backend.embed_texts(&["x"]),
        Err(EmbedError::Dimension { expected: 2, got: 3 })
    ));
    assert!(matches!(backend.embed_texts(&["x", "y"]), Err(EmbedError::Model(_))));
    assert!(matches!(backend.embed_texts(&["x"]), Err(EmbedError::BackendUnavailable(_))));
    stub.finish();
}
