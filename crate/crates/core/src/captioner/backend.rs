//! Chat-completion backends for the captioning chain.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::content::ContentRef;
use crate::http::{HttpError, JsonClient, RetryPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChatBackendKind {
    Remote,
    SyntheticMock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatBackendDescriptor {
    pub backend_kind: ChatBackendKind,
    #[serde(default)]
    pub endpoint: String,
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    /// Environment variable holding a bearer token for remote backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

fn default_max_tokens() -> usize {
    512
}

impl ChatBackendDescriptor {
    pub fn mock(model_id: impl Into<String>) -> Self {
        Self {
            backend_kind: ChatBackendKind::SyntheticMock,
            endpoint: String::new(),
            model_id: model_id.into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            api_key_env: None,
        }
    }

    pub fn id(&self) -> String {
        let kind = match self.backend_kind {
            ChatBackendKind::Remote => "remote",
            ChatBackendKind::SyntheticMock => "synthetic-mock",
        };
        format!("{kind}:{}:t{}", self.model_id, self.temperature)
    }
}

/// One piece of a user message.
#[derive(Debug, Clone, PartialEq)]
pub enum ContentPart {
    Text(String),
    Image(ContentRef),
}

/// Structured view of the step a request belongs to. Remote backends only
/// see the rendered `parts`; mocks answer from this.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Discover {
        s: usize,
        superclass: String,
        references: Vec<ContentRef>,
        strict: bool,
    },
    Describe {
        superclass: String,
        region: String,
    },
    Summarize {
        superclass: String,
        regions: Vec<String>,
        attributes: Vec<String>,
    },
    Naive {
        superclass: String,
    },
    Aggregate {
        superclass: String,
        label: String,
        summaries: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub stage: Stage,
    pub target: ContentRef,
    pub parts: Vec<ContentPart>,
}

impl ChatRequest {
    /// Concatenated text parts.
    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text(t) => Some(t.as_str()),
                ContentPart::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("")
    }

    pub fn images(&self) -> impl Iterator<Item = &ContentRef> {
        self.parts.iter().filter_map(|p| match p {
            ContentPart::Image(c) => Some(c),
            ContentPart::Text(_) => None,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ChatError {
    #[error("chat backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("unknown sample {0}")]
    UnknownSample(String),
    #[error("cannot attach {id}: {reason}")]
    Attachment { id: String, reason: String },
}

pub trait ChatBackend: Send + Sync {
    fn descriptor(&self) -> &ChatBackendDescriptor;

    /// Returns the text of the model's reply.
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError>;

    fn backend_id(&self) -> String {
        self.descriptor().id()
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn descriptor(&self) -> &ChatBackendDescriptor {
        (**self).descriptor()
    }
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        (**self).complete(request)
    }
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }
}

/// Wraps a backend and counts the requests that reach it.
pub struct CountingBackend<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: ChatBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) -> usize {
        self.calls.swap(0, Ordering::SeqCst)
    }
}

impl<B: ChatBackend> ChatBackend for CountingBackend<B> {
    fn descriptor(&self) -> &ChatBackendDescriptor {
        self.inner.descriptor()
    }
    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }
}

/// OpenAI-style chat-completions client with image attachments.
pub struct RemoteChatBackend {
    desc: ChatBackendDescriptor,
    client: JsonClient,
}

impl RemoteChatBackend {
    pub fn new(desc: ChatBackendDescriptor, retry: RetryPolicy) -> Self {
        let client = JsonClient::new(retry, desc.api_key_env.as_deref());
        Self { desc, client }
    }

    /// Builds the JSON request body for `request`.
    pub fn request_body(&self, request: &ChatRequest) -> Result<Value, ChatError> {
        let content = request
            .parts
            .iter()
            .map(|p| match p {
                ContentPart::Text(t) => Ok(json!({"type": "text", "text": t})),
                ContentPart::Image(c) => c
                    .to_url()
                    .map(|url| json!({"type": "image_url", "image_url": {"url": url}}))
                    .map_err(|e| ChatError::Attachment {
                        id: c.id.clone(),
                        reason: e.to_string(),
                    }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(json!({
            "model": self.desc.model_id,
            "temperature": self.desc.temperature,
            "max_tokens": self.desc.max_tokens,
            "messages": [{"role": "user", "content": content}],
        }))
    }
}

/// Reads `choices[0].message.content`, accepting a string or a list of text
/// parts.
pub fn response_text(resp: &Value) -> Option<String> {
    let content = resp.get("choices")?.get(0)?.get("message")?.get("content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        Value::Null => Some(String::new()),
        _ => None,
    }
}

impl ChatBackend for RemoteChatBackend {
    fn descriptor(&self) -> &ChatBackendDescriptor {
        &self.desc
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        let body = self.request_body(request)?;
        let resp: Value = self
            .client
            .post(&self.desc.endpoint, &body)
            .map_err(|e: HttpError| ChatError::BackendUnavailable(e.to_string()))?;
        response_text(&resp)
            .ok_or_else(|| ChatError::BackendUnavailable("response has no choices[0].message.content".into()))
    }
}

const FIXTURE_REGIONS: &[&str] = &[
    "crown",
    "beak",
    "wing bars",
    "tail",
    "breast",
    "nape",
    "throat",
    "eye ring",
    "legs",
    "belly",
    "back",
    "forehead",
];
const FIXTURE_WORDS: &[&str] = &[
    "speckled",
    "glossy",
    "pale",
    "striped",
    "rufous",
    "slender",
    "mottled",
    "olive",
    "barred",
    "iridescent",
    "dusky",
    "crested",
];

/// Deterministic canned responses for pipeline tests without a world model.
///
/// Discover lists `s` region names picked from a fixed pool by hashing the
/// target key; describe returns a fixed sentence per (target, region);
/// summarize concatenates the `region: attribute` pairs.
pub struct FixtureChatBackend {
    desc: ChatBackendDescriptor,
}

impl FixtureChatBackend {
    pub fn new(desc: ChatBackendDescriptor) -> Self {
        Self { desc }
    }

    fn pick(&self, parts: &[&str], pool: &'static [&'static str], n: usize) -> Vec<&'static str> {
        let mut h = Sha256::new();
        h.update(self.desc.model_id.as_bytes());
        for p in parts {
            h.update([0u8]);
            h.update(p.as_bytes());
        }
        let digest = h.finalize();
        let start = usize::from(digest[0]) % pool.len();
        (0..n).map(|i| pool[(start + i) % pool.len()]).collect()
    }
}

impl ChatBackend for FixtureChatBackend {
    fn descriptor(&self) -> &ChatBackendDescriptor {
        &self.desc
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        let key = request.target.key.as_str();
        Ok(match &request.stage {
            Stage::Discover { s, .. } => {
                let mut regions = self.pick(&[key], FIXTURE_REGIONS, *s);
                // Pool is finite; suffix repeats so names stay distinct.
                let mut out = String::new();
                for (i, r) in regions.drain(..).enumerate() {
                    let lap = i / FIXTURE_REGIONS.len();
                    let name = if lap == 0 { r.to_string() } else { format!("{r} {lap}") };
                    out.push_str(&format!("{}. {name}\n", i + 1));
                }
                out
            }
            Stage::Describe { region, superclass } => {
                let w = self.pick(&[key, region], FIXTURE_WORDS, 2);
                format!("The {region} of this {superclass} is {} and {}.", w[0], w[1])
            }
            Stage::Summarize {
                regions, attributes, ..
            } => regions
                .iter()
                .zip(attributes)
                .map(|(r, a)| format!("{r}: {a}"))
                .collect::<Vec<_>>()
                .join(" "),
            Stage::Naive { superclass } => {
                let w = self.pick(&[key, "naive"], FIXTURE_WORDS, 1);
                format!("A photo of a {} {superclass}.", w[0])
            }
            Stage::Aggregate { summaries, .. } => summaries.join(" "),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_body_shape() {
        let backend = RemoteChatBackend::new(
            ChatBackendDescriptor {
                backend_kind: ChatBackendKind::Remote,
                endpoint: "http://localhost".into(),
                model_id: "vlm".into(),
                temperature: 0.0,
                max_tokens: 64,
                api_key_env: None,
            },
            RetryPolicy::default(),
        );
        let target = ContentRef {
            id: "t".into(),
            key: "t".into(),
            source: crate::content::ContentSource::Url("https://x/y.jpg".into()),
        };
        let req = ChatRequest {
            stage: Stage::Naive {
                superclass: "dog".into(),
            },
            target: target.clone(),
            parts: vec![ContentPart::Image(target), ContentPart::Text(" Describe.".into())],
        };
        let body = backend.request_body(&req).unwrap();
        assert_eq!(body["model"], "vlm");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"][0]["type"], "image_url");
        assert_eq!(body["messages"][0]["content"][0]["image_url"]["url"], "https://x/y.jpg");
        assert_eq!(body["messages"][0]["content"][1]["text"], " Describe.");
    }

    #[test]
    fn response_text_variants() {
        let s = json!({"choices": [{"message": {"content": "hi"}}]});
        assert_eq!(response_text(&s).as_deref(), Some("hi"));
        let parts = json!({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]}}]});
        assert_eq!(response_text(&parts).as_deref(), Some("ab"));
        assert_eq!(response_text(&json!({"choices": []})), None);
    }
}
