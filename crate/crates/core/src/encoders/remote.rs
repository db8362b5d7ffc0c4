use base64::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EncodeError, EncodeItem, Encoder, EncoderDescriptor};
use crate::content::ContentSource;
use crate::http::{JsonClient, RetryPolicy};

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: Vec<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

/// Client for an embedding service speaking
/// `{"model", "input": [...]} -> {"data": [{"index", "embedding"}]}`.
pub struct RemoteEncoder {
    desc: EncoderDescriptor,
    client: JsonClient,
}

impl RemoteEncoder {
    pub fn new(desc: EncoderDescriptor, retry: RetryPolicy) -> Self {
        let client = JsonClient::new(retry, desc.api_key_env.as_deref());
        Self { desc, client }
    }

    fn wire_input(item: &EncodeItem) -> Result<String, EncodeError> {
        match item {
            EncodeItem::Text(t) => Ok(t.clone()),
            EncodeItem::Image(c) => match &c.source {
                ContentSource::Url(u) => Ok(u.clone()),
                ContentSource::Inline(b64) => Ok(b64.trim().to_string()),
                ContentSource::Path(p) => std::fs::read(p)
                    .map(|b| BASE64_STANDARD.encode(b))
                    .map_err(|e| EncodeError::ContentUnresolvable(format!("{}: {e}", p.display()))),
                ContentSource::Key => Err(EncodeError::ContentUnresolvable(format!(
                    "{}: no image bytes or URL for a remote encoder",
                    c.id
                ))),
            },
        }
    }

    /// Sends several items in one request. Results are in input order,
    /// restored from the response's `index` fields.
    pub fn encode_many(&self, items: &[EncodeItem]) -> Result<Vec<Vec<f64>>, EncodeError> {
        let input = items.iter().map(Self::wire_input).collect::<Result<Vec<_>, _>>()?;
        let resp: EmbeddingResponse = self
            .client
            .post(
                &self.desc.endpoint_or_path,
                &EmbeddingRequest {
                    model: &self.desc.model_id,
                    input,
                },
            )
            .map_err(|e| EncodeError::BackendUnavailable(e.to_string()))?;
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; items.len()];
        for d in resp.data {
            let slot = slots
                .get_mut(d.index)
                .ok_or_else(|| EncodeError::BackendUnavailable(format!("response index {} out of range", d.index)))?;
            *slot = Some(d.embedding);
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| EncodeError::BackendUnavailable(format!("response missing index {i}"))))
            .collect()
    }
}

impl Encoder for RemoteEncoder {
    fn descriptor(&self) -> &EncoderDescriptor {
        &self.desc
    }

    fn encode_raw(&self, item: &EncodeItem) -> Result<Vec<f64>, EncodeError> {
        let mut out = self.encode_many(std::slice::from_ref(item))?;
        Ok(out.remove(0))
    }
}
