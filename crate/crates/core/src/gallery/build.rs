use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use super::{Gallery, GalleryEntry, GalleryError, GalleryMetadata, GALLERY_FORMAT_VERSION};
use crate::content::ContentRef;
use crate::encoders::{batch_embed, EmbeddingVector, EncodeItem};
use crate::parallel::parallel_map;
use crate::pipeline::{fuse_with_dims, Pipeline, PipelineConfig, PipelineError, Sample, SampleText, TextMode};
use crate::selector::{compute_class_centers, ClassCenter};

/// Options for [`build_gallery`] beyond the pipeline configuration.
#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    /// Recorded shots per class; the samples passed in are used as is.
    pub shots: usize,
}

fn labeled(samples: &[Sample]) -> Result<Vec<&str>, GalleryError> {
    let mut seen = HashSet::with_capacity(samples.len());
    samples
        .iter()
        .map(|s| {
            if !seen.insert(s.id.as_str()) {
                return Err(GalleryError::DuplicateSampleId(s.id.clone()));
            }
            s.label
                .as_deref()
                .ok_or_else(|| GalleryError::MissingLabel(s.id.clone()))
        })
        .collect()
}

fn embed_images(pipeline: &Pipeline, samples: &[Sample]) -> Result<Vec<EmbeddingVector>, GalleryError> {
    let items: Vec<EncodeItem> = samples.iter().map(|s| EncodeItem::Image(s.content.clone())).collect();
    batch_embed(pipeline.image_encoder.as_ref(), &items, pipeline.max_in_flight).map_err(|e| match e {
        crate::encoders::EncodeError::Batch { index, source } => PipelineError::Encode {
            id: samples[index].id.clone(),
            source: *source,
        }
        .into(),
        other => other.into(),
    })
}

/// Describes, embeds and fuses `samples` against the given class structure.
/// Each sample's own class is excluded from its references.
#[allow(clippy::too_many_arguments)]
fn featurize(
    pipeline: &Pipeline,
    cfg: &PipelineConfig,
    samples: &[Sample],
    images: &[EmbeddingVector],
    centers: &[ClassCenter],
    image_index: &HashMap<String, EmbeddingVector>,
    contents: &HashMap<String, ContentRef>,
    dim_text: usize,
) -> Result<Vec<GalleryEntry>, GalleryError> {
    let jobs: Vec<(&Sample, &EmbeddingVector)> = samples.iter().zip(images).collect();
    let texts: Vec<Option<SampleText>> = parallel_map(&jobs, pipeline.max_in_flight, |_, (s, img)| {
        let refs = pipeline.references(cfg, s, img, centers, image_index, s.label.as_deref())?;
        pipeline.describe(cfg, s, refs, contents)
    })
    .map_err(|(_, e)| e)?;

    // Text actually embedded per sample.
    let mut embed_src: Vec<Option<String>> = texts
        .iter()
        .map(|t| t.as_ref().map(|t| t.description.summary.clone()))
        .collect();
    if cfg.text_mode == TextMode::PerCategory && cfg.uses_text() {
        let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_class
                .entry(s.label.as_deref().unwrap_or_default())
                .or_default()
                .push(i);
        }
        let captioner = pipeline.captioner();
        for (label, idx) in by_class {
            let summaries: Vec<String> = idx.iter().filter_map(|&i| embed_src[i].clone()).collect();
            let merged = captioner
                .aggregate(label, &samples[idx[0]].superclass, &summaries)
                .map_err(|source| PipelineError::Caption {
                    id: format!("class:{label}"),
                    source,
                })?;
            for i in idx {
                embed_src[i] = Some(merged.clone());
            }
        }
    }

    let text_vecs: Vec<Option<EmbeddingVector>> = parallel_map(&embed_src, pipeline.max_in_flight, |i, src| {
        src.as_deref()
            .map(|t| pipeline.embed_text(&samples[i].id, t))
            .transpose()
    })
    .map_err(|(_, e)| e)?;

    let fusion = cfg.effective_fusion();
    samples
        .iter()
        .zip(images)
        .zip(texts.iter().zip(&text_vecs))
        .map(|((s, img), (text, tv))| {
            Ok(GalleryEntry {
                sample_id: s.id.clone(),
                label: s.label.clone().expect("checked by labeled()"),
                description_key: text.as_ref().map(|t| t.cache_key.clone()).unwrap_or_default(),
                fused: fuse_with_dims(img, tv.as_ref(), dim_text, &fusion)?,
                image: img.clone(),
                content: s.content.clone(),
            })
        })
        .collect()
}

/// Builds a gallery from labeled samples.
///
/// References for each sample come from the other classes of the same
/// sample set; a sample's own class is never used.
pub fn build_gallery(
    pipeline: &Pipeline,
    cfg: &PipelineConfig,
    samples: &[Sample],
    options: &BuildOptions,
) -> Result<Gallery, GalleryError> {
    if samples.is_empty() {
        return Err(GalleryError::Empty);
    }
    let labels = labeled(samples)?;
    let images = embed_images(pipeline, samples)?;
    let image_index: HashMap<String, EmbeddingVector> = samples
        .iter()
        .zip(&images)
        .map(|(s, v)| (s.id.clone(), v.clone()))
        .collect();
    let label_index: HashMap<String, String> = samples
        .iter()
        .zip(&labels)
        .map(|(s, l)| (s.id.clone(), l.to_string()))
        .collect();
    let contents: HashMap<String, ContentRef> = samples.iter().map(|s| (s.id.clone(), s.content.clone())).collect();
    let centers = compute_class_centers(&image_index, &label_index)?;

    let dim_text = pipeline.text_encoder.descriptor().dim;
    let entries = featurize(
        pipeline,
        cfg,
        samples,
        &images,
        &centers,
        &image_index,
        &contents,
        dim_text,
    )?;
    let distinct: BTreeSet<&str> = labels.iter().copied().collect();
    let meta = GalleryMetadata {
        version: GALLERY_FORMAT_VERSION,
        classes: distinct.len(),
        shots: options.shots,
        class_labels: Vec::new(),
        class_counts: BTreeMap::new(),
        superclass: samples[0].superclass.clone(),
        dim_image: pipeline.image_encoder.descriptor().dim,
        dim_text,
        image_encoder: pipeline.image_encoder.descriptor().id(),
        text_encoder: pipeline.text_encoder.descriptor().id(),
        chat_backend: pipeline.chat.backend_id(),
        template_hash: pipeline.templates.hash(),
        pipeline: cfg.clone(),
        entry_count: 0,
        checksum: String::new(),
    };
    Gallery::new(meta, entries)
}

/// Returns a new gallery with one more class. Existing entries are carried
/// over unchanged; only the new samples are captioned and encoded, with
/// references drawn from every class including the existing ones.
pub fn insert_category(pipeline: &Pipeline, gallery: &Gallery, samples: &[Sample]) -> Result<Gallery, GalleryError> {
    if samples.is_empty() {
        return Err(GalleryError::Empty);
    }
    let labels = labeled(samples)?;
    let distinct: BTreeSet<&str> = labels.iter().copied().collect();
    if distinct.len() != 1 {
        return Err(GalleryError::MixedClasses(
            distinct.into_iter().map(String::from).collect(),
        ));
    }
    let label = labels[0];
    if gallery.has_class(label) {
        return Err(GalleryError::ClassAlreadyPresent(label.to_string()));
    }
    if let Some(dup) = samples.iter().find(|s| gallery.image_index().contains_key(&s.id)) {
        return Err(GalleryError::DuplicateSampleId(dup.id.clone()));
    }

    let cfg = &gallery.metadata.pipeline;
    let images = embed_images(pipeline, samples)?;
    let mut image_index = gallery.image_index().clone();
    let mut contents = gallery.contents().clone();
    let mut new_index = HashMap::with_capacity(samples.len());
    let mut new_labels = HashMap::with_capacity(samples.len());
    for (s, v) in samples.iter().zip(&images) {
        image_index.insert(s.id.clone(), v.clone());
        contents.insert(s.id.clone(), s.content.clone());
        new_index.insert(s.id.clone(), v.clone());
        new_labels.insert(s.id.clone(), label.to_string());
    }
    let mut centers = gallery.centers().to_vec();
    centers.extend(compute_class_centers(&new_index, &new_labels)?);

    let added = featurize(
        pipeline,
        cfg,
        samples,
        &images,
        &centers,
        &image_index,
        &contents,
        gallery.metadata.dim_text,
    )?;
    let (meta, mut entries) = gallery.clone().into_parts();
    entries.extend(added);
    Gallery::new(meta, entries)
}
