use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use fgvr_cli::serve::{router, AppState};
use fgvr_core::gallery::BuildOptions;
use fgvr_core::synth::{generate_world, SynthWorld, SynthWorldConfig};
use fgvr_core::{build_gallery, PipelineConfig, RetrievalConfig, Sample, Split};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn setup(skip_last: bool) -> (SynthWorld, Router) {
    let w = generate_world(&SynthWorldConfig {
        classes: 4,
        train_per_class: 2,
        test_per_class: 2,
        ..Default::default()
    })
    .unwrap();
    let p = w.pipeline(4);
    let last = w.classes.last().unwrap().label.clone();
    let train: Vec<Sample> = w
        .samples_for(Split::Train)
        .into_iter()
        .filter(|s| !skip_last || s.label.as_deref() != Some(&last))
        .collect();
    let g = build_gallery(&p, &PipelineConfig::default(), &train, &BuildOptions { shots: 2 }).unwrap();
    let state = AppState::new(g, p, Some(w.dataset()), RetrievalConfig::default(), None);
    (w, router(Arc::new(state)))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn health_reports_gallery() {
    let (_, app) = setup(false);
    let (status, body) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["gallery"]["classes"], 4);
    assert_eq!(body["gallery"]["entries"], 8);
    assert!(body["version"].is_string());
}

#[tokio::test]
async fn classify_by_id_finds_true_class() {
    let (w, app) = setup(false);
    for s in w.samples_for(Split::Test) {
        let (status, body) = call(&app, "POST", "/classify", Some(json!({"id": s.id, "top_k": 2}))).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        assert_eq!(body["predicted"], s.label.unwrap());
        assert_eq!(body["top"].as_array().unwrap().len(), 2);
        assert!(body["description"]["summary"].is_string());
    }
}

#[tokio::test]
async fn bad_requests_are_400() {
    let (_, app) = setup(false);
    let req = Request::builder()
        .method("POST")
        .uri("/classify")
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(
        app.clone().oneshot(req).await.unwrap().status(),
        StatusCode::BAD_REQUEST
    );
    let (status, _) = call(&app, "POST", "/classify", Some(json!({"top_k": 1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/classify", Some(json!({"image": "%%% not base64"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/classify", Some(json!({"id": "nobody"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    // Inline bytes the precomputed encoder cannot resolve.
    let (status, body) = call(&app, "POST", "/classify", Some(json!({"image": "aGVsbG8="}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
}

#[tokio::test]
async fn insert_then_duplicate_conflicts() {
    let (w, app) = setup(true);
    let last = w.classes.last().unwrap().label.clone();
    let samples: Vec<Value> = w
        .samples_for(Split::Train)
        .into_iter()
        .filter(|s| s.label.as_deref() == Some(&last))
        .map(|s| json!({"id": s.id}))
        .collect();
    let req = json!({"label": last, "samples": samples});
    let (status, body) = call(&app, "POST", "/insert_category", Some(req.clone())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["classes"], 4);
    let (status, _) = call(&app, "POST", "/insert_category", Some(req)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (_, health) = call(&app, "GET", "/health", None).await;
    assert_eq!(health["gallery"]["entries"], 8);
}
