//! Image and text embedding backends behind one contract.
//!
//! Every vector returned from [`embed_image`], [`embed_text`] and
//! [`batch_embed`] is unit-normalized; backends only produce raw features.

mod mock;
mod precomputed;
mod remote;
mod vector;

use serde::{Deserialize, Serialize};

use crate::content::ContentRef;
use crate::parallel::parallel_map;

pub(crate) use mock::tokenize;
pub use mock::MockEncoder;
pub use precomputed::{decode_f32_le, encode_f32_le, write_precomputed, PrecomputedEncoder, PrecomputedRecord};
pub use remote::RemoteEncoder;
pub use vector::{cosine, cosine_with_norm, dot, normalize, normalize_f32, squared_norm, EmbeddingVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Remote,
    PrecomputedFile,
    SyntheticMock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDescriptor {
    pub modality: Modality,
    pub backend_kind: EncoderKind,
    #[serde(default)]
    pub endpoint_or_path: String,
    pub model_id: String,
    pub dim: usize,
    /// Environment variable holding a bearer token for remote backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

impl EncoderDescriptor {
    pub fn mock(modality: Modality, model_id: impl Into<String>, dim: usize) -> Self {
        Self {
            modality,
            backend_kind: EncoderKind::SyntheticMock,
            endpoint_or_path: String::new(),
            model_id: model_id.into(),
            dim,
            api_key_env: None,
        }
    }

    /// Identifier recorded in gallery metadata and cache keys.
    pub fn id(&self) -> String {
        format!("{:?}:{}:{}", self.backend_kind, self.model_id, self.dim).to_lowercase()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EncodeError {
    #[error("content unresolvable: {0}")]
    ContentUnresolvable(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty text")]
    EmptyText,
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("vector contains NaN or infinite values")]
    NonFinite,
    #[error("encoder modality is {actual:?}, expected {expected:?}")]
    WrongModality { expected: Modality, actual: Modality },
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("{path}:{line}: {reason}")]
    InvalidFile { path: String, line: usize, reason: String },
    #[error("item {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<EncodeError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EncodeError {
    pub fn is_unavailable(&self) -> bool {
        match self {
            EncodeError::BackendUnavailable(_) => true,
            EncodeError::Batch { source, .. } => source.is_unavailable(),
            _ => false,
        }
    }
}

/// An input to an encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncodeItem {
    Image(ContentRef),
    Text(String),
}

impl EncodeItem {
    pub fn modality(&self) -> Modality {
        match self {
            EncodeItem::Image(_) => Modality::Image,
            EncodeItem::Text(_) => Modality::Text,
        }
    }
}

/// A backend that turns content into raw (unnormalized) features.
///
/// Implementations must be deterministic for fixed configuration and input.
pub trait Encoder: Send + Sync {
    fn descriptor(&self) -> &EncoderDescriptor;

    fn encode_raw(&self, item: &EncodeItem) -> Result<Vec<f64>, EncodeError>;
}

fn embed(enc: &dyn Encoder, item: &EncodeItem) -> Result<EmbeddingVector, EncodeError> {
    let desc = enc.descriptor();
    if item.modality() != desc.modality {
        return Err(EncodeError::WrongModality {
            expected: item.modality(),
            actual: desc.modality,
        });
    }
    if let EncodeItem::Text(t) = item {
        if t.trim().is_empty() {
            return Err(EncodeError::EmptyText);
        }
    }
    let raw = enc.encode_raw(item)?;
    if raw.len() != desc.dim {
        return Err(EncodeError::DimensionMismatch {
            expected: desc.dim,
            got: raw.len(),
        });
    }
    normalize(&raw)
}

pub fn embed_image(enc: &dyn Encoder, content: &ContentRef) -> Result<EmbeddingVector, EncodeError> {
    embed(enc, &EncodeItem::Image(content.clone()))
}

pub fn embed_text(enc: &dyn Encoder, text: &str) -> Result<EmbeddingVector, EncodeError> {
    embed(enc, &EncodeItem::Text(text.to_string()))
}

/// Embeds `items` with at most `max_in_flight` concurrent backend calls.
/// Results are in input order; a failure is reported with the item's index.
pub fn batch_embed(
    enc: &dyn Encoder,
    items: &[EncodeItem],
    max_in_flight: usize,
) -> Result<Vec<EmbeddingVector>, EncodeError> {
    parallel_map(items, max_in_flight, |_, item| embed(enc, item)).map_err(|(index, e)| EncodeError::Batch {
        index,
        source: Box::new(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(EncoderDescriptor, Vec<f64>);

    impl Encoder for Fixed {
        fn descriptor(&self) -> &EncoderDescriptor {
            &self.0
        }
        fn encode_raw(&self, _: &EncodeItem) -> Result<Vec<f64>, EncodeError> {
            Ok(self.1.clone())
        }
    }

    #[test]
    fn wrong_length_is_dimension_mismatch() {
        let enc = Fixed(EncoderDescriptor::mock(Modality::Text, "m", 3), vec![1.0, 2.0]);
        assert!(matches!(
            embed_text(&enc, "hello"),
            Err(EncodeError::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn modality_is_checked() {
        let enc = Fixed(EncoderDescriptor::mock(Modality::Text, "m", 2), vec![1.0, 2.0]);
        assert!(matches!(
            embed_image(&enc, &ContentRef::from_key("a")),
            Err(EncodeError::WrongModality { .. })
        ));
    }

    #[test]
    fn empty_text_rejected() {
        let enc = MockEncoder::new(EncoderDescriptor::mock(Modality::Text, "m", 16)).unwrap();
        assert!(matches!(embed_text(&enc, ""), Err(EncodeError::EmptyText)));
        assert!(matches!(embed_text(&enc, "  \n"), Err(EncodeError::EmptyText)));
    }
}
