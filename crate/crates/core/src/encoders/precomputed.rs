use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EncodeError, EncodeItem, Encoder, EncoderDescriptor};

/// One line of a precomputed-embedding JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecomputedRecord {
    pub id: String,
    /// Base64 of little-endian `f32` values.
    pub embedding: String,
    pub dim: usize,
}

pub fn encode_f32_le(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    BASE64_STANDARD.encode(bytes)
}

pub fn decode_f32_le(b64: &str) -> Result<Vec<f32>, String> {
    let bytes = BASE64_STANDARD.decode(b64).map_err(|e| e.to_string())?;
    if bytes.len() % 4 != 0 {
        return Err(format!("payload length {} is not a multiple of 4", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes a precomputed-embedding file.
pub fn write_precomputed<'a, I>(path: &Path, records: I) -> std::io::Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for (id, values) in records {
        let rec = PrecomputedRecord {
            id: id.to_string(),
            embedding: encode_f32_le(values),
            dim: values.len(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Looks embeddings up by content key (images) or by exact text (texts).
pub struct PrecomputedEncoder {
    desc: EncoderDescriptor,
    table: HashMap<String, Vec<f32>>,
}

impl PrecomputedEncoder {
    pub fn open(desc: EncoderDescriptor) -> Result<Self, EncodeError> {
        let path = desc.endpoint_or_path.clone();
        let file = std::fs::File::open(&path)?;
        let mut table = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| EncodeError::InvalidFile {
                path: path.clone(),
                line: i + 1,
                reason,
            };
            let rec: PrecomputedRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let values = decode_f32_le(&rec.embedding).map_err(bad)?;
            if values.len() != rec.dim {
                return Err(bad(format!("dim field {} but payload has {}", rec.dim, values.len())));
            }
            table.insert(rec.id, values);
        }
        Ok(Self { desc, table })
    }

    pub fn from_table(desc: EncoderDescriptor, table: HashMap<String, Vec<f32>>) -> Self {
        Self { desc, table }
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Encoder for PrecomputedEncoder {
    fn descriptor(&self) -> &EncoderDescriptor {
        &self.desc
    }

    fn encode_raw(&self, item: &EncodeItem) -> Result<Vec<f64>, EncodeError> {
        let key = match item {
            EncodeItem::Image(c) => c.key.as_str(),
            EncodeItem::Text(t) => t.as_str(),
        };
        self.table
            .get(key)
            .map(|v| v.iter().map(|&x| f64::from(x)).collect())
            .ok_or_else(|| EncodeError::ContentUnresolvable(format!("no precomputed embedding for {key:?}")))
    }
}
