//! Experiment driver: manifests, k-shot sampling, evaluation, ablation grids
//! and parameter sweeps.

mod grid;
pub mod published;

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::content::{ContentRef, ContentSource};
use crate::gallery::{build_gallery, BuildOptions, GalleryError};
use crate::parallel::parallel_map;
use crate::pipeline::{sample_rng, Pipeline, PipelineConfig, PipelineError, Sample};
use crate::retrieval::{classify, RetrievalConfig, RetrievalError};

pub use grid::{run_ablation, sweep, GridCell, GridRow, GridTable, SweepParam};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Image path (relative to the manifest) or URL.
    #[serde(default)]
    pub image: Option<String>,
    /// Key into a precomputed-embedding file.
    #[serde(default)]
    pub embedding_ref: Option<String>,
    pub label: String,
    pub superclass: String,
    pub split: Split,
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("manifest has no records")]
    EmptyManifest,
    #[error("manifest has no test records")]
    EmptyTestSplit,
    #[error("invalid value {value} for {param}: {reason}")]
    InvalidParameterValue {
        param: String,
        value: String,
        reason: String,
    },
    #[error("manifest line {line}: {reason}")]
    InvalidManifest { line: usize, reason: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Gallery(#[from] GalleryError),
    #[error("query {id}: {source}")]
    Retrieval {
        id: String,
        #[source]
        source: RetrievalError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub(crate) fn invalid(param: &str, value: impl ToString, reason: impl Into<String>) -> Self {
        HarnessError::InvalidParameterValue {
            param: param.to_string(),
            value: value.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: String,
    /// Directory relative image paths are resolved against.
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
    index: HashMap<String, usize>,
}

impl Manifest {
    /// Validates ids and labels.
    pub fn new(
        name: impl Into<String>,
        base_dir: impl Into<PathBuf>,
        records: Vec<ManifestRecord>,
    ) -> Result<Self, HarnessError> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let bad = |reason: String| HarnessError::InvalidManifest { line: i + 1, reason };
            if r.id.is_empty() {
                return Err(bad("empty id".into()));
            }
            if index.insert(r.id.clone(), i).is_some() {
                return Err(bad(format!("duplicate id {}", r.id)));
            }
            if r.label.is_empty() || r.superclass.is_empty() {
                return Err(bad(format!("record {} needs a label and a superclass", r.id)));
            }
        }
        Ok(Self {
            name: name.into(),
            base_dir: base_dir.into(),
            records,
            index,
        })
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let file = std::fs::File::open(path)?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| HarnessError::InvalidManifest {
                line: i + 1,
                reason: e.to_string(),
            })?);
        }
        let name = path
            .file_stem()
            .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(name, base, records)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn sample(&self, record: &ManifestRecord) -> Sample {
        let key = record.embedding_ref.clone().unwrap_or_else(|| record.id.clone());
        let source = match &record.image {
            None => ContentSource::Key,
            Some(u) if u.starts_with("http://") || u.starts_with("https://") || u.starts_with("data:") => {
                ContentSource::Url(u.clone())
            }
            Some(p) => ContentSource::Path(self.base_dir.join(p)),
        };
        Sample {
            id: record.id.clone(),
            label: Some(record.label.clone()),
            superclass: record.superclass.clone(),
            content: ContentRef {
                id: record.id.clone(),
                key,
                source,
            },
        }
    }
}

/// Training ids chosen for one (K, seed) episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotSample {
    pub shots: usize,
    pub seed: u64,
    /// Ascending by label, then by draw order.
    pub train_ids: Vec<String>,
    /// Classes with fewer than K training samples, with their counts.
    pub shortfall: BTreeMap<String, usize>,
}

/// Per class, draws `min(K, available)` training samples without
/// replacement. The draw for a class depends only on `(seed, label)`, and
/// smaller K take a prefix of the same permutation.
pub fn sample_k_shot(manifest: &Manifest, shots: usize, seed: u64) -> Result<ShotSample, HarnessError> {
    if manifest.records.is_empty() {
        return Err(HarnessError::EmptyManifest);
    }
    if shots == 0 {
        return Err(HarnessError::invalid("shots", shots, "K must be at least 1"));
    }
    let mut by_class: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in manifest.split(Split::Train) {
        by_class.entry(&r.label).or_default().push(&r.id);
    }
    let mut train_ids = Vec::new();
    let mut shortfall = BTreeMap::new();
    for (label, mut ids) in by_class {
        ids.sort_unstable();
        ids.shuffle(&mut sample_rng(seed, "k-shot", label));
        if ids.len() < shots {
            shortfall.insert(label.to_string(), ids.len());
        }
        train_ids.extend(ids.into_iter().take(shots).map(String::from));
    }
    Ok(ShotSample {
        shots,
        seed,
        train_ids,
        shortfall,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub shots: usize,
    pub pipeline: PipelineConfig,
    pub retrieval: RetrievalConfig,
    /// Evaluate only the first `limit` test records (by id).
    pub limit: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            shots: 16,
            pipeline: PipelineConfig::default(),
            retrieval: RetrievalConfig::default(),
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: String,
    pub predicted: String,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendIds {
    pub image_encoder: String,
    pub text_encoder: String,
    pub chat_backend: String,
    pub template_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub config: ExperimentConfig,
    pub backends: BackendIds,
    pub correct: usize,
    pub total: usize,
    /// `correct / total`.
    pub accuracy: f64,
    pub accuracy_percent: f64,
    pub per_class: BTreeMap<String, ClassAccuracy>,
    /// `confusion[true][predicted]`.
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
    pub predictions: Vec<Prediction>,
    pub train_ids: Vec<String>,
    pub shortfall: BTreeMap<String, usize>,
    /// Set when `limit` cut the test split short.
    pub limited: bool,
    pub cache_hits: usize,
    pub cache_misses: usize,
    pub wall_clock_secs: f64,
}

/// Builds a gallery from the sampled shots, featurizes and classifies every
/// test record, and reports accuracy.
pub fn evaluate(pipeline: &Pipeline, cfg: &ExperimentConfig, manifest: &Manifest) -> Result<EvalReport, HarnessError> {
    let started = Instant::now();
    if manifest.records.is_empty() {
        return Err(HarnessError::EmptyManifest);
    }
    let mut test: Vec<&ManifestRecord> = manifest.split(Split::Test).collect();
    if test.is_empty() {
        return Err(HarnessError::EmptyTestSplit);
    }
    test.sort_by(|a, b| a.id.cmp(&b.id));
    let limited = cfg.limit.is_some_and(|l| l < test.len());
    if let Some(l) = cfg.limit {
        test.truncate(l);
    }
    let (hits0, misses0) = pipeline.cache.stats();

    let shots = sample_k_shot(manifest, cfg.shots, cfg.pipeline.seed)?;
    let train: Vec<Sample> = shots
        .train_ids
        .iter()
        .map(|id| manifest.sample(manifest.get(id).expect("sampled from manifest")))
        .collect();
    let gallery = build_gallery(pipeline, &cfg.pipeline, &train, &BuildOptions { shots: cfg.shots })?;
    tracing::debug!(entries = gallery.len(), shots = cfg.shots, mode = %cfg.pipeline.mode, "gallery built");

    let queries: Vec<Sample> = test
        .iter()
        .map(|r| {
            let mut s = manifest.sample(r);
            s.label = None;
            s
        })
        .collect();
    let predictions = parallel_map(&queries, pipeline.max_in_flight, |i, q| {
        let features = pipeline.featurize_query(&gallery, q)?;
        let result = classify(&features.fused, &gallery, &cfg.retrieval).map_err(|source| HarnessError::Retrieval {
            id: q.id.clone(),
            source,
        })?;
        Ok::<_, HarnessError>(Prediction {
            id: q.id.clone(),
            label: test[i].label.clone(),
            predicted: result.predicted_label,
            margin: result.margin,
        })
    })
    .map_err(|(_, e)| e)?;

    let mut per_class: BTreeMap<String, ClassAccuracy> = BTreeMap::new();
    let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut correct = 0;
    for p in &predictions {
        let hit = p.label == p.predicted;
        correct += usize::from(hit);
        let c = per_class.entry(p.label.clone()).or_insert(ClassAccuracy {
            correct: 0,
            total: 0,
            accuracy: 0.0,
        });
        c.total += 1;
        c.correct += usize::from(hit);
        *confusion
            .entry(p.label.clone())
            .or_default()
            .entry(p.predicted.clone())
            .or_default() += 1;
    }
    for c in per_class.values_mut() {
        c.accuracy = c.correct as f64 / c.total as f64;
    }
    let total = predictions.len();
    let accuracy = correct as f64 / total as f64;
    let (hits1, misses1) = pipeline.cache.stats();
    Ok(EvalReport {
        dataset: manifest.name.clone(),
        config: cfg.clone(),
        backends: BackendIds {
            image_encoder: gallery.metadata.image_encoder.clone(),
            text_encoder: gallery.metadata.text_encoder.clone(),
            chat_backend: gallery.metadata.chat_backend.clone(),
            template_hash: gallery.metadata.template_hash.clone(),
        },
        correct,
        total,
        accuracy,
        accuracy_percent: 100.0 * accuracy,
        per_class,
        confusion,
        predictions,
        train_ids: shots.train_ids,
        shortfall: shots.shortfall,
        limited,
        cache_hits: hits1.saturating_sub(hits0),
        cache_misses: misses1.saturating_sub(misses0),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}
