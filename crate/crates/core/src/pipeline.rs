//! Wiring shared by gallery construction and query featurization: which
//! captioning variant runs, how references are chosen, and how the two
//! modalities are fused.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captioner::{
    CaptionError, Captioner, ChatBackend, DescriptionCache, PromptTemplates, StructuredDescription,
};
use crate::content::ContentRef;
use crate::encoders::{embed_image, embed_text, EmbeddingVector, EncodeError, Encoder};
use crate::gallery::{fuse, FusionConfig, Gallery, GalleryError};
use crate::selector::{
    select_random_references, select_references, ClassCenter, ReferenceSet, RepresentativeRule, SelectorError,
};

/// Captioning variant, from image-only up to the full reference-guided chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptionMode {
    /// No text; fusion uses the image block only.
    Image,
    /// One naive captioning prompt, no regions, no references.
    Description,
    /// Region chain without references.
    Structured,
    /// Region chain with references from randomly chosen classes.
    RandomRef,
    /// Region chain with references from the most similar classes.
    SimilarRef,
}

impl CaptionMode {
    pub const ALL: [CaptionMode; 5] = [
        CaptionMode::Image,
        CaptionMode::Description,
        CaptionMode::Structured,
        CaptionMode::RandomRef,
        CaptionMode::SimilarRef,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CaptionMode::Image => "image",
            CaptionMode::Description => "description",
            CaptionMode::Structured => "structured",
            CaptionMode::RandomRef => "random-ref",
            CaptionMode::SimilarRef => "similar-ref",
        }
    }
}

impl fmt::Display for CaptionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaptionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CaptionMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let valid: Vec<_> = CaptionMode::ALL.iter().map(|m| m.as_str()).collect();
            format!("unknown mode {s:?}; valid modes: {}", valid.join(", "))
        })
    }
}

/// Which text is embedded for gallery entries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextMode {
    /// Each entry uses its own sample's summary.
    #[default]
    PerSample,
    /// Each entry uses one aggregated description of its class.
    PerCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: CaptionMode,
    /// Regions per description.
    pub s: usize,
    /// Reference exemplars per target.
    pub t: usize,
    pub fusion: FusionConfig,
    pub text_mode: TextMode,
    pub representative: RepresentativeRule,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: CaptionMode::SimilarRef,
            s: 3,
            t: 4,
            fusion: FusionConfig::default(),
            text_mode: TextMode::PerSample,
            representative: RepresentativeRule::NearestToTarget,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Mode after applying `t = 0`, which means no references.
    pub fn effective_mode(&self) -> CaptionMode {
        match self.mode {
            CaptionMode::RandomRef | CaptionMode::SimilarRef if self.t == 0 => CaptionMode::Structured,
            m => m,
        }
    }

    pub fn effective_fusion(&self) -> FusionConfig {
        let mut f = self.fusion;
        if self.effective_mode() == CaptionMode::Image {
            f.text_weight = 0.0;
            if f.image_weight == 0.0 {
                f.image_weight = 1.0;
            }
        }
        f
    }

    pub fn uses_text(&self) -> bool {
        self.effective_mode() != CaptionMode::Image
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("sample {id}: {source}")]
    Encode {
        id: String,
        #[source]
        source: EncodeError,
    },
    #[error("sample {id}: {source}")]
    Caption {
        id: String,
        #[source]
        source: CaptionError,
    },
    #[error("sample {id}: {source}")]
    Select {
        id: String,
        #[source]
        source: SelectorError,
    },
    #[error(transparent)]
    Gallery(#[from] Box<GalleryError>),
}

impl PipelineError {
    pub fn is_unavailable(&self) -> bool {
        match self {
            PipelineError::Encode { source, .. } => source.is_unavailable(),
            PipelineError::Caption { source, .. } => source.is_unavailable(),
            _ => false,
        }
    }

    pub fn is_unresolvable(&self) -> bool {
        matches!(
            self,
            PipelineError::Encode {
                source: EncodeError::ContentUnresolvable(_),
                ..
            }
        )
    }
}

/// One image with its label (unknown for queries) and superclass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub label: Option<String>,
    pub superclass: String,
    pub content: ContentRef,
}

/// Backends plus shared state used by every pipeline step.
#[derive(Clone)]
pub struct Pipeline {
    pub image_encoder: Arc<dyn Encoder>,
    pub text_encoder: Arc<dyn Encoder>,
    pub chat: Arc<dyn ChatBackend>,
    pub templates: Arc<PromptTemplates>,
    pub cache: Arc<DescriptionCache>,
    /// Concurrent backend requests for batch steps.
    pub max_in_flight: usize,
}

/// Output of describing one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleText {
    pub references: Option<ReferenceSet>,
    pub description: StructuredDescription,
    pub cache_key: String,
}

/// Features of a query image ready for retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeatures {
    pub image: EmbeddingVector,
    pub text: Option<SampleText>,
    pub fused: EmbeddingVector,
}

pub(crate) fn sample_rng(seed: u64, purpose: &str, id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update([0u8]);
    h.update(id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

impl Pipeline {
    pub fn captioner(&self) -> Captioner<'_> {
        Captioner::new(self.chat.as_ref(), &self.templates, Some(&self.cache))
    }

    pub fn embed_image(&self, sample: &Sample) -> Result<EmbeddingVector, PipelineError> {
        embed_image(self.image_encoder.as_ref(), &sample.content).map_err(|source| PipelineError::Encode {
            id: sample.id.clone(),
            source,
        })
    }

    pub fn embed_text(&self, id: &str, text: &str) -> Result<EmbeddingVector, PipelineError> {
        embed_text(self.text_encoder.as_ref(), text).map_err(|source| PipelineError::Encode {
            id: id.to_string(),
            source,
        })
    }

    /// Picks references per the configured mode. Returns `None` for modes
    /// that do not use references.
    pub fn references(
        &self,
        cfg: &PipelineConfig,
        sample: &Sample,
        image: &EmbeddingVector,
        centers: &[ClassCenter],
        image_index: &HashMap<String, EmbeddingVector>,
        exclude_label: Option<&str>,
    ) -> Result<Option<ReferenceSet>, PipelineError> {
        let wrap = |source| PipelineError::Select {
            id: sample.id.clone(),
            source,
        };
        match cfg.effective_mode() {
            CaptionMode::SimilarRef => select_references(
                &sample.id,
                image,
                centers,
                image_index,
                cfg.t,
                exclude_label,
                cfg.representative,
            )
            .map(Some)
            .map_err(wrap),
            CaptionMode::RandomRef => {
                let mut rng = sample_rng(cfg.seed, "random-ref", &sample.id);
                select_random_references(&sample.id, image, centers, cfg.t, exclude_label, &mut rng)
                    .map(Some)
                    .map_err(wrap)
            }
            _ => Ok(None),
        }
    }

    /// Captions one sample according to the mode. `contents` resolves
    /// reference sample ids to their image content.
    pub fn describe(
        &self,
        cfg: &PipelineConfig,
        sample: &Sample,
        references: Option<ReferenceSet>,
        contents: &HashMap<String, ContentRef>,
    ) -> Result<Option<SampleText>, PipelineError> {
        let captioner = self.captioner();
        let wrap = |source| PipelineError::Caption {
            id: sample.id.clone(),
            source,
        };
        let mode = cfg.effective_mode();
        let (description, ref_ids) = match mode {
            CaptionMode::Image => return Ok(None),
            CaptionMode::Description => (
                captioner
                    .naive_caption(&sample.content, &sample.superclass)
                    .map_err(wrap)?,
                vec![],
            ),
            CaptionMode::Structured => (
                captioner
                    .caption(&sample.content, &[], &sample.superclass, cfg.s)
                    .map_err(wrap)?,
                vec![],
            ),
            CaptionMode::RandomRef | CaptionMode::SimilarRef => {
                let set = references.as_ref().expect("reference modes carry a reference set");
                let ref_contents = set
                    .references
                    .iter()
                    .map(|r| {
                        contents.get(&r.sample_id).cloned().ok_or_else(|| {
                            wrap(CaptionError::InvalidInput(format!(
                                "no content for reference {}",
                                r.sample_id
                            )))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let ids = ref_contents.iter().map(|c| c.id.clone()).collect();
                (
                    captioner
                        .caption(&sample.content, &ref_contents, &sample.superclass, cfg.s)
                        .map_err(wrap)?,
                    ids,
                )
            }
        };
        let s = if mode == CaptionMode::Description { 0 } else { cfg.s };
        let cache_key = crate::captioner::cache_key(
            &sample.content.id,
            &captioner.backend_id(),
            captioner.template_hash(),
            s,
            &ref_ids,
        );
        Ok(Some(SampleText {
            references,
            description,
            cache_key,
        }))
    }

    /// Full query path: embed, pick references against the gallery (no label
    /// exclusion), caption, embed the summary and fuse.
    pub fn featurize_query(&self, gallery: &Gallery, sample: &Sample) -> Result<QueryFeatures, PipelineError> {
        let cfg = &gallery.metadata.pipeline;
        let image = self.embed_image(sample)?;
        let references = self.references(cfg, sample, &image, gallery.centers(), gallery.image_index(), None)?;
        let text = self.describe(cfg, sample, references, gallery.contents())?;
        let fusion = cfg.effective_fusion();
        let text_vec = match &text {
            Some(t) => Some(self.embed_text(&sample.id, &t.description.summary)?),
            None => None,
        };
        let fused = fuse_with_dims(&image, text_vec.as_ref(), gallery.metadata.dim_text, &fusion)
            .map_err(|e| PipelineError::Gallery(Box::new(e)))?;
        Ok(QueryFeatures { image, text, fused })
    }
}

/// Fuses `image` with `text`, substituting a zero block of `dim_text` when
/// there is no text.
pub(crate) fn fuse_with_dims(
    image: &EmbeddingVector,
    text: Option<&EmbeddingVector>,
    dim_text: usize,
    cfg: &FusionConfig,
) -> Result<EmbeddingVector, GalleryError> {
    match text {
        Some(t) => fuse(image, t, cfg),
        None => {
            let zeros = EmbeddingVector::from_raw_unchecked(vec![0.0; dim_text]);
            let mut c = *cfg;
            c.text_weight = 0.0;
            fuse(image, &zeros, &c)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing_lists_valid_modes() {
        assert_eq!("similar-ref".parse::<CaptionMode>().unwrap(), CaptionMode::SimilarRef);
        let err = "bogus".parse::<CaptionMode>().unwrap_err();
        for m in CaptionMode::ALL {
            assert!(err.contains(m.as_str()));
        }
    }

    #[test]
    fn zero_references_means_structured() {
        let cfg = PipelineConfig {
            t: 0,
            ..Default::default()
        };
        assert_eq!(cfg.effective_mode(), CaptionMode::Structured);
    }

    #[test]
    fn image_mode_drops_text_weight() {
        let cfg = PipelineConfig {
            mode: CaptionMode::Image,
            ..Default::default()
        };
        assert_eq!(cfg.effective_fusion().text_weight, 0.0);
        assert!(!cfg.uses_text());
    }
}
