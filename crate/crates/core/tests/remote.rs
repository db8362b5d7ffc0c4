//! Remote clients against a local mock service.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use fgvr_core::captioner::{
    ChatBackendDescriptor, ChatBackendKind, ChatError, ChatRequest, ContentPart, RemoteChatBackend, Stage,
};
use fgvr_core::encoders::{embed_text, EncodeError, EncodeItem, RemoteEncoder};
use fgvr_core::{
    ChatBackend, ContentRef, ContentSource, Encoder, EncoderDescriptor, EncoderKind, Modality, RetryPolicy,
};
use serde_json::{json, Value};

#[derive(Default)]
struct Mock {
    hits: AtomicUsize,
    bodies: Mutex<Vec<Value>>,
}

type Shared = Arc<Mock>;

/// Embedding of an input string: `[len, 1, 0]`. Replies in reverse order.
async fn embed(State(m): State<Shared>, Json(body): Json<Value>) -> Json<Value> {
    m.hits.fetch_add(1, Ordering::SeqCst);
    let inputs = body["input"].as_array().unwrap().clone();
    let data: Vec<Value> = inputs
        .iter()
        .enumerate()
        .rev()
        .map(|(i, s)| json!({"index": i, "embedding": [s.as_str().unwrap().len() as f64, 1.0, 0.0]}))
        .collect();
    m.bodies.lock().unwrap().push(body);
    Json(json!({"data": data}))
}

async fn flaky(State(m): State<Shared>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    if m.hits.fetch_add(1, Ordering::SeqCst) == 0 {
        return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"error": "warming up"})));
    }
    let n = body["input"].as_array().map_or(0, Vec::len);
    let data: Vec<Value> = (0..n)
        .map(|i| json!({"index": i, "embedding": [0.0, 2.0, 0.0]}))
        .collect();
    (StatusCode::OK, Json(json!({"data": data})))
}

async fn reject(State(m): State<Shared>) -> (StatusCode, &'static str) {
    m.hits.fetch_add(1, Ordering::SeqCst);
    (StatusCode::BAD_REQUEST, "bad input")
}

async fn chat(State(m): State<Shared>, Json(body): Json<Value>) -> Json<Value> {
    m.hits.fetch_add(1, Ordering::SeqCst);
    m.bodies.lock().unwrap().push(body);
    Json(
        json!({"choices": [{"message": {"role": "assistant", "content": [{"type": "text", "text": "rufous "}, {"type": "text", "text": "crown"}]}}]}),
    )
}

fn serve(router: Router<Shared>) -> (String, Shared) {
    let state = Shared::default();
    let app = router.with_state(state.clone());
    let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .worker_threads(2)
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    (format!("http://{}", rx.recv().unwrap()), state)
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        initial_backoff_ms: 5,
        timeout_ms: 5_000,
    }
}

fn text_encoder(endpoint: String) -> RemoteEncoder {
    RemoteEncoder::new(
        EncoderDescriptor {
            modality: Modality::Text,
            backend_kind: EncoderKind::Remote,
            endpoint_or_path: endpoint,
            model_id: "embed-test".into(),
            dim: 3,
            api_key_env: None,
        },
        fast_retry(),
    )
}

#[test]
fn encoder_restores_input_order_from_indices() {
    let (base, state) = serve(Router::new().route("/embed", post(embed)));
    let enc = text_encoder(format!("{base}/embed"));
    let items: Vec<EncodeItem> = ["a", "bbb", "cc"]
        .iter()
        .map(|s| EncodeItem::Text(s.to_string()))
        .collect();
    let out = enc.encode_many(&items).unwrap();
    assert_eq!(out, vec![vec![1.0, 1.0, 0.0], vec![3.0, 1.0, 0.0], vec![2.0, 1.0, 0.0]]);

    let body = state.bodies.lock().unwrap()[0].clone();
    assert_eq!(body, json!({"model": "embed-test", "input": ["a", "bbb", "cc"]}));

    let v = embed_text(&enc, "abcd").unwrap();
    assert!((v.norm() - 1.0).abs() < 1e-6);
    assert!((v.as_slice()[0] / v.as_slice()[1] - 4.0).abs() < 1e-5);
}

#[test]
fn encoder_retries_after_503() {
    let (base, state) = serve(Router::new().route("/embed", post(flaky)));
    let enc = text_encoder(format!("{base}/embed"));
    let v = embed_text(&enc, "x").unwrap();
    assert_eq!(v.as_slice(), &[0.0, 1.0, 0.0]);
    assert_eq!(state.hits.load(Ordering::SeqCst), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let (base, state) = serve(Router::new().route("/embed", post(reject)));
    let enc = text_encoder(format!("{base}/embed"));
    let err = embed_text(&enc, "x").unwrap_err();
    assert!(
        matches!(err, EncodeError::BackendUnavailable(ref m) if m.contains("400")),
        "{err}"
    );
    assert_eq!(state.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn image_without_bytes_cannot_be_sent() {
    let enc = RemoteEncoder::new(
        EncoderDescriptor {
            modality: Modality::Image,
            backend_kind: EncoderKind::Remote,
            endpoint_or_path: "http://127.0.0.1:9/unused".into(),
            model_id: "m".into(),
            dim: 3,
            api_key_env: None,
        },
        fast_retry(),
    );
    let err = enc
        .encode_many(&[EncodeItem::Image(ContentRef::from_key("k"))])
        .unwrap_err();
    assert!(matches!(err, EncodeError::ContentUnresolvable(_)));
}

#[test]
fn chat_request_shape_and_reply() {
    let (base, state) = serve(Router::new().route("/v1/chat/completions", post(chat)));
    let backend = RemoteChatBackend::new(
        ChatBackendDescriptor {
            backend_kind: ChatBackendKind::Remote,
            endpoint: format!("{base}/v1/chat/completions"),
            model_id: "vlm-test".into(),
            temperature: 0.0,
            max_tokens: 64,
            api_key_env: None,
        },
        fast_retry(),
    );
    let image = ContentRef {
        id: "s1".into(),
        key: "s1".into(),
        source: ContentSource::Inline("aGVsbG8=".into()),
    };
    let request = ChatRequest {
        stage: Stage::Describe {
            superclass: "bird".into(),
            region: "crown".into(),
        },
        target: image.clone(),
        parts: vec![
            ContentPart::Text("Describe the crown.".into()),
            ContentPart::Image(image),
        ],
    };
    assert_eq!(backend.complete(&request).unwrap(), "rufous crown");

    let body = state.bodies.lock().unwrap()[0].clone();
    assert_eq!(body["model"], "vlm-test");
    assert_eq!(body["max_tokens"], 64);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(
        body["messages"][0]["content"],
        json!([
            {"type": "text", "text": "Describe the crown."},
            {"type": "image_url", "image_url": {"url": "data:image/jpeg;base64,aGVsbG8="}}
        ])
    );
}

#[test]
fn chat_unreachable_is_unavailable() {
    let backend = RemoteChatBackend::new(
        ChatBackendDescriptor {
            backend_kind: ChatBackendKind::Remote,
            endpoint: "http://127.0.0.1:9/chat".into(),
            model_id: "m".into(),
            temperature: 0.0,
            max_tokens: 8,
            api_key_env: None,
        },
        RetryPolicy {
            attempts: 2,
            initial_backoff_ms: 1,
            timeout_ms: 500,
        },
    );
    let request = ChatRequest {
        stage: Stage::Naive {
            superclass: "bird".into(),
        },
        target: ContentRef::from_key("k"),
        parts: vec![ContentPart::Text("hi".into())],
    };
    assert!(matches!(
        backend.complete(&request),
        Err(ChatError::BackendUnavailable(_))
    ));
}

async fn echo_auth(State(m): State<Shared>, headers: axum::http::HeaderMap, Json(body): Json<Value>) -> Json<Value> {
    let auth = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_string();
    m.bodies.lock().unwrap().push(json!(auth));
    let n = body["input"].as_array().map_or(0, Vec::len);
    Json(json!({"data": (0..n).map(|i| json!({"index": i, "embedding": [1.0, 0.0, 0.0]})).collect::<Vec<_>>()}))
}

#[test]
fn api_key_is_sent_as_bearer_token() {
    let (base, state) = serve(Router::new().route("/embed", post(echo_auth)));
    std::env::set_var("FGVR_TEST_EMBED_KEY", "sekrit");
    let mut enc = text_encoder(format!("{base}/embed")).descriptor().clone();
    enc.api_key_env = Some("FGVR_TEST_EMBED_KEY".into());
    embed_text(&RemoteEncoder::new(enc, fast_retry()), "x").unwrap();
    embed_text(&text_encoder(format!("{base}/embed")), "x").unwrap();
    let seen = state.bodies.lock().unwrap().clone();
    assert_eq!(seen, vec![json!("Bearer sekrit"), json!("")]);
}
