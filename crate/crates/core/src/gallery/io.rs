//! Gallery file format: one metadata JSON line, then one JSON line per entry
//! with vectors as base64 little-endian f32.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Gallery, GalleryEntry, GalleryError, GalleryMetadata};
use crate::content::ContentRef;
use crate::encoders::{decode_f32_le, encode_f32_le, EmbeddingVector};

pub const GALLERY_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EntryLine {
    sample_id: String,
    label: String,
    description_key: String,
    fused: String,
    image: String,
    content: ContentRef,
}

fn checksum(metadata_line: &[u8], entry_lines: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    h.update(metadata_line);
    for line in entry_lines {
        h.update(b"\n");
        h.update(line);
    }
    hex::encode(h.finalize())
}

fn metadata_line(meta: &GalleryMetadata) -> Vec<u8> {
    serde_json::to_vec(meta).expect("metadata serializes")
}

pub fn save_gallery(gallery: &Gallery, path: &Path) -> Result<(), GalleryError> {
    let entry_lines: Vec<Vec<u8>> = gallery
        .entries()
        .iter()
        .map(|e| {
            serde_json::to_vec(&EntryLine {
                sample_id: e.sample_id.clone(),
                label: e.label.clone(),
                description_key: e.description_key.clone(),
                fused: encode_f32_le(e.fused.as_slice()),
                image: encode_f32_le(e.image.as_slice()),
                content: e.content.clone(),
            })
            .expect("entry serializes")
        })
        .collect();
    let mut meta = gallery.metadata.clone();
    meta.version = GALLERY_FORMAT_VERSION;
    meta.checksum.clear();
    let refs: Vec<&[u8]> = entry_lines.iter().map(Vec::as_slice).collect();
    meta.checksum = checksum(&metadata_line(&meta), &refs);

    let mut out = metadata_line(&meta);
    out.push(b'\n');
    for line in &entry_lines {
        out.extend_from_slice(line);
        out.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    // Write beside the target and rename so readers never see a partial file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn vector(b64: &str, line: usize, field: &str) -> Result<EmbeddingVector, GalleryError> {
    decode_f32_le(b64)
        .map(EmbeddingVector::from_raw_unchecked)
        .map_err(|reason| GalleryError::Malformed {
            line,
            reason: format!("{field}: {reason}"),
        })
}

/// Loads and verifies a gallery file. The version is checked before anything
/// else, then completeness, then the checksum.
pub fn load_gallery(path: &Path) -> Result<Gallery, GalleryError> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(GalleryError::TruncatedFile("empty file".into()));
    }
    let mut lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    let complete = bytes.ends_with(b"\n");
    if complete {
        lines.pop();
    }
    let header: serde_json::Value = serde_json::from_slice(lines[0]).map_err(|e| {
        if complete || lines.len() > 1 {
            GalleryError::Malformed {
                line: 1,
                reason: e.to_string(),
            }
        } else {
            GalleryError::TruncatedFile("metadata line incomplete".into())
        }
    })?;
    let found = header
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or(GalleryError::Malformed {
            line: 1,
            reason: "missing version".into(),
        })?;
    if found != u64::from(GALLERY_FORMAT_VERSION) {
        return Err(GalleryError::VersionMismatch {
            expected: GALLERY_FORMAT_VERSION,
            found: found.try_into().unwrap_or(u32::MAX),
        });
    }
    let meta: GalleryMetadata = serde_json::from_value(header).map_err(|e| GalleryError::Malformed {
        line: 1,
        reason: e.to_string(),
    })?;
    let entry_lines = &lines[1..];
    if entry_lines.len() < meta.entry_count || !complete {
        return Err(GalleryError::TruncatedFile(format!(
            "expected {} entries, found {}{}",
            meta.entry_count,
            entry_lines.len(),
            if complete { "" } else { " (last line cut off)" }
        )));
    }
    if entry_lines.len() > meta.entry_count {
        return Err(GalleryError::Malformed {
            line: meta.entry_count + 2,
            reason: format!("{} entries declared, more present", meta.entry_count),
        });
    }
    // Hash the metadata line as stored, not as re-serialized, so every byte
    // of the file is covered.
    let stored = format!("\"checksum\":{}", serde_json::Value::String(meta.checksum.clone()));
    let raw = String::from_utf8_lossy(lines[0]);
    let blank = match raw.matches(&stored).count() {
        1 => raw.replacen(&stored, "\"checksum\":\"\"", 1),
        _ => {
            return Err(GalleryError::Malformed {
                line: 1,
                reason: "checksum field not found verbatim".into(),
            })
        }
    };
    let computed = checksum(blank.as_bytes(), entry_lines);
    if computed != meta.checksum {
        return Err(GalleryError::ChecksumMismatch {
            stored: meta.checksum,
            computed,
        });
    }

    let entries = entry_lines
        .iter()
        .enumerate()
        .map(|(i, raw)| {
            let line = i + 2;
            let e: EntryLine = serde_json::from_slice(raw).map_err(|err| GalleryError::Malformed {
                line,
                reason: err.to_string(),
            })?;
            Ok(GalleryEntry {
                fused: vector(&e.fused, line, "fused")?,
                image: vector(&e.image, line, "image")?,
                sample_id: e.sample_id,
                label: e.label,
                description_key: e.description_key,
                content: e.content,
            })
        })
        .collect::<Result<Vec<_>, GalleryError>>()?;
    Gallery::new(meta, entries)
}
