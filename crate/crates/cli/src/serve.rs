//! HTTP serving: classification against an immutable gallery snapshot and
//! incremental category insertion with an atomic swap.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::prelude::*;
use fgvr_core::gallery::GalleryError;
use fgvr_core::pipeline::PipelineError;
use fgvr_core::{
    insert_category, retrieval, save_gallery, ContentRef, ContentSource, Gallery, Manifest, Pipeline, RetrievalConfig,
    Sample,
};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tracing::info;

use crate::commands::{description_json, load_manifest, open_gallery, open_pipeline, ranking_json};
use crate::{AppConfig, ServeArgs};

pub struct AppState {
    gallery: RwLock<Arc<Gallery>>,
    pipeline: Pipeline,
    manifest: Option<Manifest>,
    retrieval: RetrievalConfig,
    /// Serializes insertions; classification never takes it.
    insert_lock: tokio::sync::Mutex<()>,
    persist: Option<PathBuf>,
}

impl AppState {
    pub fn new(
        gallery: Gallery,
        pipeline: Pipeline,
        manifest: Option<Manifest>,
        retrieval: RetrievalConfig,
        persist: Option<PathBuf>,
    ) -> Self {
        Self {
            gallery: RwLock::new(Arc::new(gallery)),
            pipeline,
            manifest,
            retrieval,
            insert_lock: tokio::sync::Mutex::new(()),
            persist,
        }
    }

    /// Current gallery. Requests keep using the snapshot they started with.
    pub fn snapshot(&self) -> Arc<Gallery> {
        self.gallery.read().expect("gallery lock poisoned").clone()
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1}))).into_response()
    }
}

fn pipeline_status(e: &PipelineError) -> StatusCode {
    if e.is_unavailable() {
        StatusCode::SERVICE_UNAVAILABLE
    } else if e.is_unresolvable() {
        StatusCode::BAD_REQUEST
    } else {
        StatusCode::INTERNAL_SERVER_ERROR
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        Self(pipeline_status(&e), e.to_string())
    }
}

impl From<GalleryError> for ApiError {
    fn from(e: GalleryError) -> Self {
        let status = match &e {
            GalleryError::ClassAlreadyPresent(_) => StatusCode::CONFLICT,
            GalleryError::DuplicateSampleId(_)
            | GalleryError::MixedClasses(_)
            | GalleryError::MissingLabel(_)
            | GalleryError::Empty => StatusCode::BAD_REQUEST,
            GalleryError::Pipeline(p) => pipeline_status(p),
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, e.to_string())
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

/// Content for an `image` field: an http(s) URL, a data URI, or bare base64.
fn image_content(id: Option<&str>, image: &str) -> Result<ContentRef, ApiError> {
    let image = image.trim();
    let source = if image.starts_with("http://") || image.starts_with("https://") {
        ContentSource::Url(image.to_string())
    } else {
        let payload = match image.strip_prefix("data:") {
            Some(rest) => rest
                .split_once(',')
                .map(|(_, p)| p)
                .ok_or_else(|| ApiError::bad_request("data URI without payload"))?,
            None => image,
        };
        BASE64_STANDARD
            .decode(payload)
            .map_err(|e| ApiError::bad_request(format!("image is neither a URL nor base64: {e}")))?;
        ContentSource::Inline(payload.to_string())
    };
    let id = match id {
        Some(id) => id.to_string(),
        None => format!("query-{}", &hex::encode(Sha256::digest(image.as_bytes()))[..16]),
    };
    Ok(ContentRef {
        key: id.clone(),
        id,
        source,
    })
}

fn manifest_sample(state: &AppState, id: &str) -> Result<Sample, ApiError> {
    let m = state
        .manifest
        .as_ref()
        .ok_or_else(|| ApiError::bad_request("requests by id need the server to have a manifest"))?;
    let rec = m
        .get(id)
        .ok_or_else(|| ApiError::bad_request(format!("unknown id {id}")))?;
    Ok(m.sample(rec))
}

#[derive(Debug, Deserialize)]
struct ClassifyRequest {
    image: Option<String>,
    id: Option<String>,
    top_k: Option<usize>,
    superclass: Option<String>,
}

#[derive(Debug, Deserialize)]
struct InsertSample {
    id: String,
    image: Option<String>,
}

#[derive(Debug, Deserialize)]
struct InsertRequest {
    label: String,
    superclass: Option<String>,
    samples: Vec<InsertSample>,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    let g = state.snapshot();
    let m = &g.metadata;
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "gallery": {
            "classes": m.classes,
            "entries": m.entry_count,
            "class_labels": m.class_labels,
            "superclass": m.superclass,
            "dim": m.dim(),
            "image_encoder": m.image_encoder,
            "text_encoder": m.text_encoder,
            "chat_backend": m.chat_backend,
            "pipeline": m.pipeline,
        },
    }))
}

async fn classify(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: ClassifyRequest = parse_body(&body)?;
    let gallery = state.snapshot();
    let sample = match (&req.image, &req.id) {
        (Some(image), _) => Sample {
            id: String::new(),
            label: None,
            superclass: req
                .superclass
                .clone()
                .unwrap_or_else(|| gallery.metadata.superclass.clone()),
            content: image_content(req.id.as_deref(), image)?,
        },
        (None, Some(id)) => manifest_sample(&state, id)?,
        (None, None) => return Err(ApiError::bad_request("request needs \"image\" or \"id\"")),
    };
    let sample = Sample {
        id: sample.content.id.clone(),
        ..sample
    };
    let top_k = req.top_k.unwrap_or(5).max(1);
    let st = state.clone();
    let g = gallery.clone();
    let (features, result) = tokio::task::spawn_blocking(move || {
        let features = st.pipeline.featurize_query(&g, &sample)?;
        let result = retrieval::classify(&features.fused, &g, &st.retrieval)
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        Ok::<_, ApiError>((features, result))
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let mut out = ranking_json(&result, top_k);
    out["description"] = description_json(features.text.as_ref());
    out["gallery_classes"] = json!(gallery.metadata.classes);
    out["gallery_entries"] = json!(gallery.len());
    Ok(Json(out))
}

async fn insert(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: InsertRequest = parse_body(&body)?;
    if req.samples.is_empty() {
        return Err(ApiError::bad_request("no samples"));
    }
    let _guard = state.insert_lock.lock().await;
    let current = state.snapshot();
    if current.has_class(&req.label) {
        return Err(GalleryError::ClassAlreadyPresent(req.label).into());
    }
    let superclass = req
        .superclass
        .clone()
        .unwrap_or_else(|| current.metadata.superclass.clone());
    let samples = req
        .samples
        .iter()
        .map(|s| {
            let content = match &s.image {
                Some(image) => image_content(Some(&s.id), image)?,
                None => manifest_sample(&state, &s.id)?.content,
            };
            Ok(Sample {
                id: s.id.clone(),
                label: Some(req.label.clone()),
                superclass: superclass.clone(),
                content,
            })
        })
        .collect::<Result<Vec<_>, ApiError>>()?;

    let st = state.clone();
    let base = current.clone();
    let grown = tokio::task::spawn_blocking(move || {
        let g = insert_category(&st.pipeline, &base, &samples)?;
        if let Some(path) = &st.persist {
            save_gallery(&g, path)?;
        }
        Ok::<_, GalleryError>(g)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let (classes, entries) = (grown.metadata.classes, grown.len());
    *state.gallery.write().expect("gallery lock poisoned") = Arc::new(grown);
    info!(label = %req.label, classes, entries, "category inserted");
    Ok(Json(
        json!({"label": req.label, "classes": classes, "entries": entries}),
    ))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/classify", post(classify))
        .route("/insert_category", post(insert))
        .with_state(state)
}

pub fn run(cfg: AppConfig, a: ServeArgs) -> anyhow::Result<()> {
    let gallery = open_gallery(&a.gallery)?;
    let manifest = if a.data.manifest.is_some() || cfg.manifest.is_some() {
        Some(load_manifest(&cfg, &a.data)?)
    } else {
        None
    };
    let (pipeline, _) = open_pipeline(&cfg)?;
    let persist = a.persist.then(|| a.gallery.clone());
    let state = Arc::new(AppState::new(
        gallery,
        pipeline,
        manifest,
        cfg.experiment.retrieval,
        persist,
    ));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
