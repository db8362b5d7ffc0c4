//! Few-shot gallery of fused image/text embeddings.

mod build;
mod io;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::content::ContentRef;
use crate::encoders::{normalize, EmbeddingVector, EncodeError};
use crate::pipeline::{PipelineConfig, PipelineError};
use crate::selector::{compute_class_centers, ClassCenter, SelectorError};

pub use build::{build_gallery, insert_category, BuildOptions};
pub use io::{load_gallery, save_gallery, GALLERY_FORMAT_VERSION};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    #[default]
    Concat,
}

/// How image and text embeddings are combined. Both inputs are unit vectors;
/// the result is `[image_weight * img, text_weight * txt]`, renormalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub image_weight: f64,
    pub text_weight: f64,
    pub renormalize: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Concat,
            image_weight: 1.0,
            text_weight: 1.0,
            renormalize: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GalleryError {
    #[error("duplicate sample id {0}")]
    DuplicateSampleId(String),
    #[error("class {0} is already in the gallery")]
    ClassAlreadyPresent(String),
    #[error("sample {0} has no label")]
    MissingLabel(String),
    #[error("insert_category needs samples of exactly one class, got {0:?}")]
    MixedClasses(Vec<String>),
    #[error("no samples to build from")]
    Empty,
    #[error("fusion weights must be finite, non-negative and not both zero")]
    InvalidFusion,
    #[error("gallery format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("gallery file is truncated: {0}")]
    TruncatedFile(String),
    #[error("gallery checksum mismatch: stored {stored}, computed {computed}")]
    ChecksumMismatch { stored: String, computed: String },
    #[error("gallery line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Vector(#[from] EncodeError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<Box<GalleryError>> for GalleryError {
    fn from(e: Box<GalleryError>) -> Self {
        *e
    }
}

/// Concatenates the weighted unit inputs and, if configured, renormalizes.
pub fn fuse(
    image: &EmbeddingVector,
    text: &EmbeddingVector,
    cfg: &FusionConfig,
) -> Result<EmbeddingVector, GalleryError> {
    let ok = |w: f64| w.is_finite() && w >= 0.0;
    if !ok(cfg.image_weight) || !ok(cfg.text_weight) || cfg.image_weight + cfg.text_weight == 0.0 {
        return Err(GalleryError::InvalidFusion);
    }
    let mut v = Vec::with_capacity(image.dim() + text.dim());
    v.extend(image.as_slice().iter().map(|&x| cfg.image_weight * x as f64));
    v.extend(text.as_slice().iter().map(|&x| cfg.text_weight * x as f64));
    if cfg.renormalize {
        Ok(normalize(&v)?)
    } else {
        Ok(EmbeddingVector::from_raw_unchecked(
            v.into_iter().map(|x| x as f32).collect(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub sample_id: String,
    pub label: String,
    /// Cache key of the description the text block came from; empty in
    /// image-only galleries.
    pub description_key: String,
    pub fused: EmbeddingVector,
    /// Image embedding, kept so class centers and references can be rebuilt.
    pub image: EmbeddingVector,
    /// Where the image lives, so it can be shown to the captioner as a
    /// reference.
    pub content: ContentRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryMetadata {
    pub version: u32,
    /// Number of classes.
    pub classes: usize,
    /// Requested shots per class.
    pub shots: usize,
    pub class_labels: Vec<String>,
    pub class_counts: BTreeMap<String, usize>,
    pub superclass: String,
    pub dim_image: usize,
    pub dim_text: usize,
    pub image_encoder: String,
    pub text_encoder: String,
    pub chat_backend: String,
    pub template_hash: String,
    pub pipeline: PipelineConfig,
    pub entry_count: usize,
    /// Hex SHA-256 over the file with this field blank.
    #[serde(default)]
    pub checksum: String,
}

impl GalleryMetadata {
    /// Metadata with no backends recorded, for galleries assembled directly
    /// from vectors.
    pub fn bare(dim_image: usize, dim_text: usize) -> Self {
        Self {
            version: GALLERY_FORMAT_VERSION,
            classes: 0,
            shots: 0,
            class_labels: Vec::new(),
            class_counts: BTreeMap::new(),
            superclass: String::new(),
            dim_image,
            dim_text,
            image_encoder: String::new(),
            text_encoder: String::new(),
            chat_backend: String::new(),
            template_hash: String::new(),
            pipeline: PipelineConfig::default(),
            entry_count: 0,
            checksum: String::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim_image + self.dim_text
    }
}

/// An immutable gallery plus derived lookup tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    pub metadata: GalleryMetadata,
    entries: Vec<GalleryEntry>,
    centers: Vec<ClassCenter>,
    image_index: HashMap<String, EmbeddingVector>,
    contents: HashMap<String, ContentRef>,
}

impl Gallery {
    /// Validates entries against `metadata` and derives class centers.
    pub fn new(mut metadata: GalleryMetadata, entries: Vec<GalleryEntry>) -> Result<Self, GalleryError> {
        let mut image_index = HashMap::with_capacity(entries.len());
        let mut labels = HashMap::with_capacity(entries.len());
        let mut contents = HashMap::with_capacity(entries.len());
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for e in &entries {
            if image_index.insert(e.sample_id.clone(), e.image.clone()).is_some() {
                return Err(GalleryError::DuplicateSampleId(e.sample_id.clone()));
            }
            if e.fused.dim() != metadata.dim() {
                return Err(EncodeError::DimensionMismatch {
                    expected: metadata.dim(),
                    got: e.fused.dim(),
                }
                .into());
            }
            labels.insert(e.sample_id.clone(), e.label.clone());
            contents.insert(e.sample_id.clone(), e.content.clone());
            *counts.entry(e.label.clone()).or_default() += 1;
        }
        let centers = if entries.is_empty() {
            Vec::new()
        } else {
            compute_class_centers(&image_index, &labels)?
        };
        metadata.class_labels = counts.keys().cloned().collect();
        metadata.classes = counts.len();
        metadata.class_counts = counts;
        metadata.entry_count = entries.len();
        Ok(Self {
            metadata,
            entries,
            centers,
            image_index,
            contents,
        })
    }

    /// Gallery whose keys are the given vectors, treated as image-only
    /// features. Sample ids must be unique.
    pub fn from_vectors<I>(rows: I) -> Result<Self, GalleryError>
    where
        I: IntoIterator<Item = (String, String, EmbeddingVector)>,
    {
        let entries: Vec<GalleryEntry> = rows
            .into_iter()
            .map(|(sample_id, label, v)| GalleryEntry {
                content: ContentRef::from_key(sample_id.clone()),
                sample_id,
                label,
                description_key: String::new(),
                fused: v.clone(),
                image: v,
            })
            .collect();
        let dim = entries.first().map_or(0, |e| e.fused.dim());
        Self::new(GalleryMetadata::bare(dim, 0), entries)
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn centers(&self) -> &[ClassCenter] {
        &self.centers
    }

    pub fn image_index(&self) -> &HashMap<String, EmbeddingVector> {
        &self.image_index
    }

    pub fn contents(&self) -> &HashMap<String, ContentRef> {
        &self.contents
    }

    pub fn has_class(&self, label: &str) -> bool {
        self.metadata.class_counts.contains_key(label)
    }

    pub(crate) fn into_parts(self) -> (GalleryMetadata, Vec<GalleryEntry>) {
        (self.metadata, self.entries)
    }
}
