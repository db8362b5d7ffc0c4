//! Subcommand implementations. Each returns the JSON document printed on
//! stdout; report files go to the command's output path.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use fgvr_core::backends::{open_chat, open_encoder};
use fgvr_core::captioner::{ChatBackendDescriptor, ChatBackendKind, CountingBackend};
use fgvr_core::gallery::BuildOptions;
use fgvr_core::harness::{self, run_ablation, sample_k_shot, GridTable, HarnessError};
use fgvr_core::synth::{generate_world, SynthWorldConfig};
use fgvr_core::{
    load_gallery, retrieval, save_gallery, AffinityResult, CaptionMode, ChatBackend, ContentRef, ContentSource,
    DescriptionCache, EncoderDescriptor, EncoderKind, ExperimentConfig, Gallery, Manifest, Modality, Pipeline,
    PromptTemplates, Sample,
};
use serde_json::{json, Value};
use tracing::{info, warn};

use crate::{usage, AppConfig, CaptionArgs, ClassifyArgs, DataArgs, EvaluateArgs, GridArgs, PipelineArgs, SweepArgs};
use crate::{AblateArgs, BuildArgs, SynthArgs};

pub type CountedChat = Arc<CountingBackend<Arc<dyn ChatBackend>>>;

/// Opens the configured backends. The chat backend is wrapped so commands
/// can report how many requests reached it.
pub fn open_pipeline(cfg: &AppConfig) -> anyhow::Result<(Pipeline, CountedChat)> {
    let b = &cfg.backends;
    let image_encoder = open_encoder(&b.image_encoder, b.retry).context("opening image encoder")?;
    let text_encoder = open_encoder(&b.text_encoder, b.retry).context("opening text encoder")?;
    let chat = Arc::new(CountingBackend::new(
        open_chat(&b.chat, b.retry).context("opening chat backend")?,
    ));
    let templates = match &cfg.templates {
        Some(p) => PromptTemplates::load(p)
            .with_context(|| format!("reading templates {}", p.display()))?
            .map_err(|e| usage(format!("templates {}: {e}", p.display())))?,
        None => PromptTemplates::default(),
    };
    let cache = match &cfg.cache {
        Some(p) => DescriptionCache::open(p).with_context(|| format!("opening cache {}", p.display()))?,
        None => DescriptionCache::in_memory(),
    };
    let pipeline = Pipeline {
        image_encoder,
        text_encoder,
        chat: chat.clone(),
        templates: Arc::new(templates),
        cache: Arc::new(cache),
        max_in_flight: cfg.max_in_flight,
    };
    Ok((pipeline, chat))
}

pub fn load_manifest(cfg: &AppConfig, data: &DataArgs) -> anyhow::Result<Manifest> {
    let path = data
        .manifest
        .clone()
        .or_else(|| cfg.manifest.clone())
        .ok_or_else(|| usage("no manifest: pass --manifest or set `manifest` in the config"))?;
    if !path.is_file() {
        return Err(usage(format!("manifest {} not found", path.display())));
    }
    Manifest::load(&path).with_context(|| format!("loading manifest {}", path.display()))
}

pub fn open_gallery(path: &Path) -> anyhow::Result<Gallery> {
    if !path.is_file() {
        return Err(usage(format!("gallery {} not found", path.display())));
    }
    load_gallery(path).with_context(|| format!("loading gallery {}", path.display()))
}

impl PipelineArgs {
    /// Applies the flags that were given and checks the result.
    pub fn apply(&self, exp: &mut ExperimentConfig) -> anyhow::Result<()> {
        let p = &mut exp.pipeline;
        if let Some(m) = self.mode {
            p.mode = m;
        }
        if let Some(s) = self.s {
            p.s = s;
        }
        if let Some(t) = self.t {
            p.t = t;
        }
        if let Some(m) = self.text_mode {
            p.text_mode = m;
        }
        if let Some(w) = self.image_weight {
            p.fusion.image_weight = w;
        }
        if let Some(w) = self.text_weight {
            p.fusion.text_weight = w;
        }
        if let Some(b) = self.beta {
            exp.retrieval.beta = b;
        }
        if let Some(a) = self.aggregation {
            exp.retrieval.aggregation = a;
        }
        check_experiment(exp)
    }
}

fn check_experiment(exp: &ExperimentConfig) -> anyhow::Result<()> {
    let p = &exp.pipeline;
    if p.s == 0 {
        return Err(usage("s must be at least 1"));
    }
    if exp.shots == 0 {
        return Err(usage("shots must be at least 1"));
    }
    if !exp.retrieval.beta.is_finite() || exp.retrieval.beta < 0.0 {
        return Err(usage(format!(
            "beta must be finite and non-negative, got {}",
            exp.retrieval.beta
        )));
    }
    let w = [p.fusion.image_weight, p.fusion.text_weight];
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w[0] + w[1] == 0.0 {
        return Err(usage("fusion weights must be finite, non-negative and not both zero"));
    }
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn cache_summary(pipeline: &Pipeline, chat: &CountedChat) -> Value {
    let (hits, misses) = pipeline.cache.stats();
    let lookups = hits + misses;
    json!({
        "hits": hits,
        "misses": misses,
        "hit_rate": if lookups == 0 { 0.0 } else { hits as f64 / lookups as f64 },
        "chat_calls": chat.calls(),
    })
}

fn harness_error(e: HarnessError) -> anyhow::Error {
    match e {
        HarnessError::InvalidParameterValue { .. } => usage(e.to_string()),
        other => other.into(),
    }
}

pub fn synth(cfg: AppConfig, a: SynthArgs) -> anyhow::Result<Value> {
    let wc = SynthWorldConfig {
        classes: a.classes,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        vocab_size: a.vocab_size,
        attrs_per_class: a.attrs_per_class,
        overlap: a.overlap,
        image_dim: a.image_dim,
        image_noise: a.noise,
        hallucination_rate: a.hallucination,
        genericity_rate: a.genericity,
        seed: cfg.seed,
        superclass: a.superclass,
    };
    let world = generate_world(&wc).map_err(|e| usage(e.to_string()))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let dir = a.out.canonicalize()?;
    world.write(&dir)?;
    let world_path = dir.join("world.json").to_string_lossy().into_owned();

    let mut out = cfg;
    out.manifest = Some(dir.join("manifest.jsonl"));
    out.cache = Some(dir.join("captions.jsonl"));
    out.backends.image_encoder = world.image_descriptor(dir.join("embeddings.jsonl").to_string_lossy());
    out.backends.text_encoder = EncoderDescriptor {
        modality: Modality::Text,
        backend_kind: EncoderKind::SyntheticMock,
        endpoint_or_path: world_path.clone(),
        model_id: "synth-vocab".into(),
        dim: wc.vocab_size + 1,
        api_key_env: None,
    };
    out.backends.chat = ChatBackendDescriptor {
        backend_kind: ChatBackendKind::SyntheticMock,
        endpoint: world_path,
        ..world.mllm().descriptor().clone()
    };
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, out.to_toml())?;
    info!(dir = %dir.display(), "synthetic world written");
    Ok(json!({
        "dir": dir,
        "config": config_path,
        "manifest": dir.join("manifest.jsonl"),
        "records": world.samples.len(),
        "classes": world.classes.iter().map(|c| json!({"label": c.label, "tokens": c.tokens})).collect::<Vec<_>>(),
        "world": wc,
    }))
}

pub fn build_gallery(mut cfg: AppConfig, a: BuildArgs) -> anyhow::Result<Value> {
    let manifest = load_manifest(&cfg, &a.data)?;
    if let Some(k) = a.shots {
        cfg.experiment.shots = k;
    }
    a.pipeline.apply(&mut cfg.experiment)?;
    let exp = &cfg.experiment;
    let (pipeline, chat) = open_pipeline(&cfg)?;

    let t0 = Instant::now();
    let shots = sample_k_shot(&manifest, exp.shots, exp.pipeline.seed).map_err(harness_error)?;
    let samples: Vec<Sample> = shots
        .train_ids
        .iter()
        .map(|id| manifest.sample(manifest.get(id).expect("sampled from manifest")))
        .collect();
    let t_sample = t0.elapsed().as_secs_f64();
    let gallery = fgvr_core::build_gallery(&pipeline, &exp.pipeline, &samples, &BuildOptions { shots: exp.shots })?;
    let t_build = t0.elapsed().as_secs_f64() - t_sample;
    save_gallery(&gallery, &a.out)?;
    let t_save = t0.elapsed().as_secs_f64() - t_sample - t_build;

    let cache = cache_summary(&pipeline, &chat);
    info!(
        entries = gallery.len(),
        classes = gallery.metadata.classes,
        chat_calls = chat.calls(),
        "gallery written to {}",
        a.out.display()
    );
    Ok(json!({
        "gallery": a.out,
        "entries": gallery.len(),
        "classes": gallery.metadata.classes,
        "shortfall": shots.shortfall,
        "timing_secs": {"sample": t_sample, "build": t_build, "save": t_save},
        "cache": cache,
        "config": cfg,
    }))
}

/// A query from `--id` (via the manifest) or `--image` (path or URL).
fn query_sample(
    cfg: &AppConfig,
    image: Option<&str>,
    id: Option<&str>,
    data: &DataArgs,
    superclass: &str,
) -> anyhow::Result<Sample> {
    if let Some(id) = id {
        let manifest = load_manifest(cfg, data)?;
        let rec = manifest
            .get(id)
            .ok_or_else(|| usage(format!("id {id} is not in the manifest")))?;
        return Ok(manifest.sample(rec));
    }
    let image = image.expect("clap requires --image or --id");
    let content = if image.starts_with("http://") || image.starts_with("https://") {
        ContentRef {
            id: image.to_string(),
            key: image.to_string(),
            source: ContentSource::Url(image.to_string()),
        }
    } else {
        let path = PathBuf::from(image);
        if !path.is_file() {
            return Err(usage(format!("image {image} not found")));
        }
        ContentRef::from_path(image, path)
    };
    Ok(Sample {
        id: content.id.clone(),
        label: None,
        superclass: superclass.to_string(),
        content,
    })
}

fn warn_on_backend_drift(pipeline: &Pipeline, gallery: &Gallery) {
    let m = &gallery.metadata;
    let now = [
        (
            "image encoder",
            pipeline.image_encoder.descriptor().id(),
            &m.image_encoder,
        ),
        ("text encoder", pipeline.text_encoder.descriptor().id(), &m.text_encoder),
        ("chat backend", pipeline.chat.backend_id(), &m.chat_backend),
    ];
    for (what, current, built) in now {
        if !built.is_empty() && &current != built {
            warn!("{what} {current} differs from the one the gallery was built with ({built})");
        }
    }
}

/// JSON view of a classification.
pub fn ranking_json(r: &AffinityResult, top: usize) -> Value {
    json!({
        "predicted": r.predicted_label,
        "margin": r.margin,
        "top": r.ranked.iter().take(top.min(r.ranked.len())).map(|c| json!({"label": c.label, "score": c.score})).collect::<Vec<_>>(),
        "classes": r.ranked.len(),
    })
}

pub fn description_json(text: Option<&fgvr_core::pipeline::SampleText>) -> Value {
    match text {
        None => Value::Null,
        Some(t) => json!({
            "summary": t.description.summary,
            "regions": t.description.regions,
            "attributes": t.description.region_attributes,
            "references": t.references.as_ref().map(|r| &r.references),
            "cache_key": t.cache_key,
        }),
    }
}

pub fn classify(mut cfg: AppConfig, a: ClassifyArgs) -> anyhow::Result<Value> {
    if a.top == 0 {
        return Err(usage("--top must be at least 1"));
    }
    let gallery = open_gallery(&a.gallery)?;
    let sample = query_sample(
        &cfg,
        a.image.as_deref(),
        a.id.as_deref(),
        &a.data,
        &gallery.metadata.superclass,
    )?;
    if let Some(b) = a.beta {
        cfg.experiment.retrieval.beta = b;
    }
    if let Some(g) = a.aggregation {
        cfg.experiment.retrieval.aggregation = g;
    }
    check_experiment(&cfg.experiment)?;
    // Queries are featurized the way the gallery was built.
    cfg.experiment.pipeline = gallery.metadata.pipeline.clone();
    let (pipeline, _) = open_pipeline(&cfg)?;
    warn_on_backend_drift(&pipeline, &gallery);
    let features = pipeline.featurize_query(&gallery, &sample)?;
    let r = retrieval::classify(&features.fused, &gallery, &cfg.experiment.retrieval)?;
    let mut out = ranking_json(&r, a.top);
    out["id"] = json!(sample.id);
    out["label"] = json!(sample.label);
    out["description"] = description_json(features.text.as_ref());
    out["config"] = json!(cfg);
    Ok(out)
}

fn write_predictions_csv(path: &Path, report: &fgvr_core::EvalReport) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["id", "label", "predicted", "correct", "margin"])?;
    for p in &report.predictions {
        w.write_record([
            p.id.as_str(),
            p.label.as_str(),
            p.predicted.as_str(),
            if p.label == p.predicted { "1" } else { "0" },
            &format!("{:.6}", p.margin),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn evaluate(mut cfg: AppConfig, a: EvaluateArgs) -> anyhow::Result<Value> {
    let manifest = load_manifest(&cfg, &a.data)?;
    if let Some(k) = a.shots {
        cfg.experiment.shots = k;
    }
    if a.limit.is_some() {
        cfg.experiment.limit = a.limit;
    }
    a.pipeline.apply(&mut cfg.experiment)?;
    let (pipeline, chat) = open_pipeline(&cfg)?;
    let report = fgvr_core::evaluate(&pipeline, &cfg.experiment, &manifest).map_err(harness_error)?;

    let json_path = a.out.join("report.json");
    let csv_path = a.out.join("predictions.csv");
    write_json(&json_path, &json!({"config": cfg, "report": report}))?;
    write_predictions_csv(&csv_path, &report)?;
    info!(
        accuracy = report.accuracy_percent,
        "evaluation written to {}",
        a.out.display()
    );
    Ok(json!({
        "accuracy_percent": report.accuracy_percent,
        "correct": report.correct,
        "total": report.total,
        "limited": report.limited,
        "report": json_path,
        "predictions": csv_path,
        "cache": cache_summary(&pipeline, &chat),
        "config": cfg,
    }))
}

/// `"3"` means three seeds counting up from `base`; `"0,7"` lists them.
pub fn parse_seeds(arg: &str, base: u64) -> anyhow::Result<Vec<u64>> {
    let arg = arg.trim();
    if arg.contains(',') {
        return arg
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|e| usage(format!("bad seed {s:?}: {e}")))
            })
            .collect();
    }
    let n: u64 = arg.parse().map_err(|e| usage(format!("bad seed count {arg:?}: {e}")))?;
    if n == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    Ok((base..base + n).collect())
}

/// Expands `a..b` (inclusive, integer) and parses everything else as a number.
pub fn parse_values(items: &[String]) -> anyhow::Result<Vec<f64>> {
    let mut out = Vec::new();
    for item in items {
        let item = item.trim();
        if let Some((lo, hi)) = item.split_once("..") {
            let bad = |e: std::num::ParseIntError| usage(format!("bad range {item:?}: {e}"));
            let (lo, hi): (i64, i64) = (lo.trim().parse().map_err(bad)?, hi.trim().parse().map_err(bad)?);
            if lo > hi {
                return Err(usage(format!("empty range {item:?}")));
            }
            out.extend((lo..=hi).map(|v| v as f64));
        } else {
            out.push(item.parse().map_err(|e| usage(format!("bad value {item:?}: {e}")))?);
        }
    }
    Ok(out)
}

fn write_grid(out: &Path, stem: &str, cfg: &AppConfig, table: &GridTable) -> anyhow::Result<Value> {
    let json_path = out.join(format!("{stem}.json"));
    let csv_path = out.join(format!("{stem}.csv"));
    write_json(&json_path, &json!({"config": cfg, "table": table}))?;
    std::fs::write(&csv_path, table.to_csv())?;
    let rows: Vec<Value> = table
        .rows
        .iter()
        .map(|r| {
            json!({
                "value": r.value,
                "avg": r.avg,
                "cells": r.cells.iter().map(|c| json!({"shots": c.shots, "accuracy_percent": c.accuracy_percent})).collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(json!({"json": json_path, "csv": csv_path, "seeds": table.seeds, "rows": rows, "config": cfg}))
}

fn grid_setup(cfg: &mut AppConfig, g: &GridArgs, p: &PipelineArgs) -> anyhow::Result<(Manifest, Vec<u64>)> {
    let manifest = load_manifest(cfg, &g.data)?;
    if g.limit.is_some() {
        cfg.experiment.limit = g.limit;
    }
    p.apply(&mut cfg.experiment)?;
    if g.shots.contains(&0) {
        return Err(usage("shots must be at least 1"));
    }
    Ok((manifest, parse_seeds(&g.seeds, cfg.seed)?))
}

pub fn ablate(mut cfg: AppConfig, a: AblateArgs) -> anyhow::Result<Value> {
    let (manifest, seeds) = grid_setup(&mut cfg, &a.grid, &a.pipeline)?;
    let (pipeline, chat) = open_pipeline(&cfg)?;
    let table =
        run_ablation(&pipeline, &cfg.experiment, &manifest, &a.modes, &a.grid.shots, &seeds).map_err(harness_error)?;
    let mut out = write_grid(&a.grid.out, "ablation", &cfg, &table)?;
    out["cache"] = cache_summary(&pipeline, &chat);
    Ok(out)
}

pub fn sweep(mut cfg: AppConfig, a: SweepArgs) -> anyhow::Result<Value> {
    let (manifest, seeds) = grid_setup(&mut cfg, &a.grid, &a.pipeline)?;
    let (pipeline, chat) = open_pipeline(&cfg)?;
    let values = parse_values(&a.values)?;
    let table = harness::sweep(
        &pipeline,
        &cfg.experiment,
        &manifest,
        a.param,
        &values,
        &a.grid.shots,
        &seeds,
    )
    .map_err(harness_error)?;
    let mut out = write_grid(&a.grid.out, &format!("sweep-{}", a.param), &cfg, &table)?;
    out["cache"] = cache_summary(&pipeline, &chat);
    Ok(out)
}

pub fn caption(mut cfg: AppConfig, a: CaptionArgs) -> anyhow::Result<Value> {
    a.pipeline.apply(&mut cfg.experiment)?;
    let gallery = a.gallery.as_deref().map(open_gallery).transpose()?;
    let superclass = a
        .superclass
        .clone()
        .or_else(|| gallery.as_ref().map(|g| g.metadata.superclass.clone()))
        .unwrap_or_else(|| "object".into());
    let sample = query_sample(&cfg, a.image.as_deref(), a.id.as_deref(), &a.data, &superclass)?;
    let pc = &cfg.experiment.pipeline;
    let mode = pc.effective_mode();
    if mode == CaptionMode::Image {
        return Err(usage("mode image produces no description"));
    }
    let needs_refs = matches!(mode, CaptionMode::RandomRef | CaptionMode::SimilarRef);
    let (pipeline, chat) = open_pipeline(&cfg)?;
    let image = pipeline.embed_image(&sample)?;
    let text = match (&gallery, needs_refs) {
        (Some(g), true) => {
            let refs = pipeline.references(pc, &sample, &image, g.centers(), g.image_index(), None)?;
            pipeline.describe(pc, &sample, refs, g.contents())?
        }
        (None, true) => return Err(usage(format!("mode {mode} needs --gallery for reference candidates"))),
        (_, false) => pipeline.describe(pc, &sample, None, &Default::default())?,
    };
    Ok(json!({
        "id": sample.id,
        "mode": mode,
        "description": description_json(text.as_ref()),
        "cache": cache_summary(&pipeline, &chat),
        "config": cfg,
    }))
}
