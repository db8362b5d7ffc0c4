//! Opaque references to image content.

use std::path::PathBuf;

use base64::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where an image's bytes live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ContentSource {
    /// No bytes; the content is identified only by its lookup key. Mock and
    /// precomputed backends resolve these.
    Key,
    Path(PathBuf),
    Url(String),
    /// Base64-encoded bytes.
    Inline(String),
}

/// A sample's image as seen by encoders and chat backends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentRef {
    /// Sample id.
    pub id: String,
    /// Key used by precomputed and mock backends. Defaults to `id`.
    pub key: String,
    pub source: ContentSource,
}

impl ContentRef {
    pub fn from_key(id: impl Into<String>) -> Self {
        let id = id.into();
        Self {
            key: id.clone(),
            id,
            source: ContentSource::Key,
        }
    }

    pub fn from_path(id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        let id = id.into();
        Self {
            key: id.clone(),
            id,
            source: ContentSource::Path(path.into()),
        }
    }

    pub fn with_key(mut self, key: impl Into<String>) -> Self {
        self.key = key.into();
        self
    }

    /// Reads the raw bytes, if the source carries any.
    pub fn bytes(&self) -> std::io::Result<Option<Vec<u8>>> {
        match &self.source {
            ContentSource::Key | ContentSource::Url(_) => Ok(None),
            ContentSource::Path(p) => std::fs::read(p).map(Some),
            ContentSource::Inline(b64) => BASE64_STANDARD
                .decode(b64.trim())
                .map(Some)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
        }
    }

    /// Stable digest of the content: the bytes when available, otherwise the
    /// URL or lookup key.
    pub fn content_hash(&self) -> std::io::Result<[u8; 32]> {
        let mut h = Sha256::new();
        match (&self.source, self.bytes()?) {
            (_, Some(bytes)) => {
                h.update(b"bytes\0");
                h.update(&bytes);
            }
            (ContentSource::Url(u), None) => {
                h.update(b"url\0");
                h.update(u.as_bytes());
            }
            _ => {
                h.update(b"key\0");
                h.update(self.key.as_bytes());
            }
        }
        Ok(h.finalize().into())
    }

    /// URL suitable for an `image_url` chat attachment or an embedding
    /// request: the URL itself, or a base64 data URI.
    pub fn to_url(&self) -> std::io::Result<String> {
        match &self.source {
            ContentSource::Url(u) => Ok(u.clone()),
            ContentSource::Key => Ok(format!("urn:sample:{}", self.key)),
            ContentSource::Inline(b64) => Ok(format!("data:image/jpeg;base64,{}", b64.trim())),
            ContentSource::Path(p) => {
                let bytes = std::fs::read(p)?;
                let mime = match p
                    .extension()
                    .and_then(|e| e.to_str())
                    .map(str::to_ascii_lowercase)
                    .as_deref()
                {
                    Some("png") => "image/png",
                    Some("webp") => "image/webp",
                    Some("gif") => "image/gif",
                    _ => "image/jpeg",
                };
                Ok(format!("data:{mime};base64,{}", BASE64_STANDARD.encode(bytes)))
            }
        }
    }
}
