//! Deterministic synthetic world: attribute-based classes, stored image
//! embeddings, a vocabulary text encoder and a mock MLLM whose answers are
//! read off the latent attribute table.
//!
//! Classes sit on a ring. Each adjacent pair `(c, c+1)` shares `overlap`
//! attribute tokens on the same regions, and their image prototypes share a
//! Gaussian component, so neighbors are both visually and textually
//! confusable. The remaining regions carry tokens unique to the class.

mod mllm;
mod vocab;

use std::collections::{BTreeSet, HashMap};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::captioner::{DescriptionCache, PromptTemplates};
use crate::content::ContentRef;
use crate::encoders::{normalize, write_precomputed, EmbeddingVector, EncoderDescriptor, Modality, PrecomputedEncoder};
use crate::harness::{Manifest, ManifestRecord, Split};
use crate::pipeline::{sample_rng, Pipeline, Sample};

pub use mllm::SynthMllm;
pub use vocab::VocabTextEncoder;

const REGION_NAMES: &[&str] = &[
    "crown", "nape", "throat", "breast", "belly", "back", "wing", "tail", "bill", "eye", "leg", "flank", "rump",
    "forehead", "cheek", "mantle",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthWorldConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Attribute vocabulary size.
    pub vocab_size: usize,
    /// Regions per class; each carries one attribute token.
    pub attrs_per_class: usize,
    /// Tokens shared between ring-adjacent classes.
    pub overlap: usize,
    pub image_dim: usize,
    /// Norm of the Gaussian noise added to a class prototype.
    pub image_noise: f64,
    pub hallucination_rate: f64,
    pub genericity_rate: f64,
    pub seed: u64,
    pub superclass: String,
}

impl Default for SynthWorldConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 16,
            test_per_class: 20,
            vocab_size: 128,
            attrs_per_class: 7,
            overlap: 2,
            image_dim: 64,
            image_noise: 0.0,
            hallucination_rate: 0.0,
            genericity_rate: 0.0,
            seed: 0,
            superclass: "bird".into(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic world config: {0}")]
    InvalidConfig(String),
}

impl SynthWorldConfig {
    /// Shared-region blocks needed around the ring.
    fn blocks(&self) -> usize {
        if self.overlap == 0 {
            0
        } else if self.classes.is_multiple_of(2) {
            2
        } else {
            3
        }
    }

    fn tokens_needed(&self) -> usize {
        if self.overlap == 0 {
            self.classes * self.attrs_per_class
        } else {
            self.classes * (self.attrs_per_class - self.overlap)
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.classes < 2 {
            return bad("at least 2 classes".into());
        }
        if self.attrs_per_class == 0 || self.attrs_per_class > self.vocab_size {
            return bad(format!(
                "attrs_per_class must be in 1..={}, got {}",
                self.vocab_size, self.attrs_per_class
            ));
        }
        if self.attrs_per_class > REGION_NAMES.len() {
            return bad(format!("at most {} regions per class", REGION_NAMES.len()));
        }
        if self.overlap > 0 {
            if self.classes < 3 {
                return bad("overlap needs at least 3 classes".into());
            }
            if self.blocks() * self.overlap > self.attrs_per_class {
                return bad(format!(
                    "overlap {} needs {} regions per class with {} classes",
                    self.overlap,
                    self.blocks() * self.overlap,
                    self.classes
                ));
            }
        }
        if self.tokens_needed() > self.vocab_size {
            return bad(format!(
                "vocabulary of {} is smaller than the {} tokens the classes need",
                self.vocab_size,
                self.tokens_needed()
            ));
        }
        if self.image_dim == 0 {
            return bad("image_dim must be positive".into());
        }
        if !(self.image_noise.is_finite() && self.image_noise >= 0.0) {
            return bad("image_noise must be finite and non-negative".into());
        }
        for (name, r) in [
            ("hallucination_rate", self.hallucination_rate),
            ("genericity_rate", self.genericity_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must be in [0, 1], got {r}"));
            }
        }
        if self.hallucination_rate + self.genericity_rate > 1.0 {
            return bad("hallucination_rate + genericity_rate exceeds 1".into());
        }
        if self.train_per_class + self.test_per_class == 0 {
            return bad("no samples per class".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub label: String,
    /// Token carried by each region, indexed like [`SynthWorld::regions`].
    pub tokens: Vec<String>,
    pub prototype: EmbeddingVector,
}

impl SynthClass {
    pub fn token_set(&self) -> BTreeSet<&str> {
        self.tokens.iter().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub id: String,
    pub label: String,
    pub split: Split,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub config: SynthWorldConfig,
    pub regions: Vec<String>,
    pub vocab: Vec<String>,
    pub classes: Vec<SynthClass>,
    pub samples: Vec<SynthSample>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let g = gaussian(rng, dim);
    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    g.into_iter().map(|x| x / n).collect()
}

pub fn class_label(c: usize) -> String {
    format!("class-{c:02}")
}

/// Generates a world. Identical configs give bit-identical worlds.
pub fn generate_world(cfg: &SynthWorldConfig) -> Result<SynthWorld, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c_n, a, o) = (cfg.classes, cfg.attrs_per_class, cfg.overlap);

    let vocab: Vec<String> = (0..cfg.vocab_size).map(|i| format!("attr{i:03}")).collect();
    let mut pool: Vec<usize> = (0..cfg.vocab_size).collect();
    pool.shuffle(&mut rng);
    let mut pool = pool.into_iter();

    // Pair p joins classes p and p+1 (mod C) and owns one block of regions.
    let pairs = if o == 0 { 0 } else { c_n };
    let block_of = |p: usize| if c_n % 2 == 1 && p == c_n - 1 { 2 } else { p % 2 };
    let mut tokens: Vec<Vec<Option<usize>>> = vec![vec![None; a]; c_n];
    for p in 0..pairs {
        let b = block_of(p);
        for j in 0..o {
            let tok = pool.next().expect("validated vocabulary size");
            let r = b * o + j;
            tokens[p][r] = Some(tok);
            tokens[(p + 1) % c_n][r] = Some(tok);
        }
    }
    for row in &mut tokens {
        for slot in row.iter_mut().filter(|s| s.is_none()) {
            *slot = Some(pool.next().expect("validated vocabulary size"));
        }
    }

    let own: Vec<Vec<f64>> = (0..c_n).map(|_| unit_gaussian(&mut rng, cfg.image_dim)).collect();
    let shared: Vec<Vec<f64>> = (0..pairs).map(|_| unit_gaussian(&mut rng, cfg.image_dim)).collect();
    let classes: Vec<SynthClass> = (0..c_n)
        .map(|c| {
            let mut v = own[c].clone();
            if pairs > 0 {
                for p in [(c + c_n - 1) % c_n, c] {
                    v.iter_mut().zip(&shared[p]).for_each(|(x, s)| *x += s);
                }
            }
            SynthClass {
                label: class_label(c),
                tokens: tokens[c].iter().map(|t| vocab[t.unwrap()].clone()).collect(),
                prototype: normalize(&v).expect("sum of independent Gaussians is non-zero"),
            }
        })
        .collect();

    let per_class = cfg.train_per_class + cfg.test_per_class;
    let mut samples = Vec::with_capacity(c_n * per_class);
    for class in &classes {
        for i in 0..per_class {
            let id = format!("{}-{i:03}", class.label);
            let embedding = if cfg.image_noise == 0.0 {
                class.prototype.clone()
            } else {
                let mut srng = sample_rng(cfg.seed, "synth-noise", &id);
                let scale = cfg.image_noise / (cfg.image_dim as f64).sqrt();
                let v: Vec<f64> = class
                    .prototype
                    .as_slice()
                    .iter()
                    .zip(gaussian(&mut srng, cfg.image_dim))
                    .map(|(&p, g)| p as f64 + scale * g)
                    .collect();
                normalize(&v).map_err(|e| SynthError::InvalidConfig(format!("noise cancelled a prototype: {e}")))?
            };
            samples.push(SynthSample {
                id,
                label: class.label.clone(),
                split: if i < cfg.train_per_class {
                    Split::Train
                } else {
                    Split::Test
                },
                embedding,
            });
        }
    }

    Ok(SynthWorld {
        config: cfg.clone(),
        regions: REGION_NAMES[..a].iter().map(|s| s.to_string()).collect(),
        vocab,
        classes,
        samples,
    })
}

impl SynthWorld {
    pub fn class(&self, label: &str) -> Option<&SynthClass> {
        self.classes.iter().find(|c| c.label == label)
    }

    pub fn manifest(&self) -> Vec<ManifestRecord> {
        self.samples
            .iter()
            .map(|s| ManifestRecord {
                id: s.id.clone(),
                image: None,
                embedding_ref: Some(s.id.clone()),
                label: s.label.clone(),
                superclass: self.config.superclass.clone(),
                split: s.split,
            })
            .collect()
    }

    pub fn samples_for(&self, split: Split) -> Vec<Sample> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| Sample {
                id: s.id.clone(),
                label: Some(s.label.clone()),
                superclass: self.config.superclass.clone(),
                content: ContentRef::from_key(s.id.clone()),
            })
            .collect()
    }

    pub fn image_descriptor(&self, path: impl Into<String>) -> EncoderDescriptor {
        EncoderDescriptor {
            modality: Modality::Image,
            backend_kind: crate::encoders::EncoderKind::PrecomputedFile,
            endpoint_or_path: path.into(),
            model_id: format!("synth-image-s{}", self.config.seed),
            dim: self.config.image_dim,
            api_key_env: None,
        }
    }

    /// Image encoder that returns each sample's stored embedding.
    pub fn image_encoder(&self) -> PrecomputedEncoder {
        let table: HashMap<String, Vec<f32>> = self
            .samples
            .iter()
            .map(|s| (s.id.clone(), s.embedding.as_slice().to_vec()))
            .collect();
        PrecomputedEncoder::from_table(self.image_descriptor(String::new()), table)
    }

    pub fn text_encoder(&self) -> VocabTextEncoder {
        VocabTextEncoder::new(self.vocab.clone())
    }

    pub fn mllm(&self) -> SynthMllm {
        SynthMllm::new(self.clone())
    }

    pub fn dataset(&self) -> Manifest {
        Manifest::new(format!("synth-s{}", self.config.seed), ".", self.manifest()).expect("generated ids are unique")
    }

    /// Pipeline over this world's mock backends with a fresh in-memory cache.
    pub fn pipeline(&self, max_in_flight: usize) -> Pipeline {
        Pipeline {
            image_encoder: Arc::new(self.image_encoder()),
            text_encoder: Arc::new(self.text_encoder()),
            chat: Arc::new(self.mllm()),
            templates: Arc::new(PromptTemplates::default()),
            cache: Arc::new(DescriptionCache::in_memory()),
            max_in_flight,
        }
    }

    /// Writes `manifest.jsonl`, `embeddings.jsonl` and `world.json` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut out = BufWriter::new(std::fs::File::create(dir.join("manifest.jsonl"))?);
        for rec in self.manifest() {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        write_precomputed(
            &dir.join("embeddings.jsonl"),
            self.samples.iter().map(|s| (s.id.as_str(), s.embedding.as_slice())),
        )?;
        std::fs::write(dir.join("world.json"), serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::cosine;

    #[test]
    fn same_seed_same_world() {
        let cfg = SynthWorldConfig {
            image_noise: 0.3,
            ..Default::default()
        };
        assert_eq!(generate_world(&cfg).unwrap(), generate_world(&cfg).unwrap());
        let other = generate_world(&SynthWorldConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(other, generate_world(&cfg).unwrap());
    }

    #[test]
    fn noiseless_samples_share_prototype() {
        let w = generate_world(&SynthWorldConfig::default()).unwrap();
        for s in &w.samples {
            assert_eq!(s.embedding, w.class(&s.label).unwrap().prototype);
        }
    }

    #[test]
    fn adjacent_jaccard_matches_overlap() {
        for classes in [5usize, 6] {
            let cfg = SynthWorldConfig {
                classes,
                attrs_per_class: 3,
                overlap: 1,
                vocab_size: 32,
                ..Default::default()
            };
            let w = generate_world(&cfg).unwrap();
            for i in 0..classes {
                for j in 0..classes {
                    if i == j {
                        continue;
                    }
                    let (a, b) = (w.classes[i].token_set(), w.classes[j].token_set());
                    assert_eq!(a.len(), 3);
                    let inter = a.intersection(&b).count() as f64;
                    let union = a.union(&b).count() as f64;
                    let adjacent = (i + 1) % classes == j || (j + 1) % classes == i;
                    let expected = if adjacent { 1.0 / 5.0 } else { 0.0 };
                    assert_eq!(inter / union, expected, "classes {i},{j} of {classes}");
                }
            }
        }
    }

    #[test]
    fn shared_tokens_sit_on_the_same_region() {
        let w = generate_world(&SynthWorldConfig::default()).unwrap();
        for c in 0..w.classes.len() {
            let next = &w.classes[(c + 1) % w.classes.len()];
            let same_slot = w.classes[c]
                .tokens
                .iter()
                .zip(&next.tokens)
                .filter(|(a, b)| a == b)
                .count();
            assert_eq!(same_slot, w.config.overlap);
        }
    }

    #[test]
    fn neighbors_are_visually_closer() {
        let w = generate_world(&SynthWorldConfig::default()).unwrap();
        let p = |i: usize| w.classes[i].prototype.as_slice();
        assert!(cosine(p(0), p(1)) > cosine(p(0), p(5)));
    }

    #[test]
    fn invalid_configs() {
        let cases = [
            SynthWorldConfig {
                vocab_size: 10,
                ..Default::default()
            },
            SynthWorldConfig {
                hallucination_rate: 1.5,
                ..Default::default()
            },
            SynthWorldConfig {
                classes: 5,
                attrs_per_class: 5,
                overlap: 2,
                ..Default::default()
            },
            SynthWorldConfig {
                classes: 1,
                ..Default::default()
            },
        ];
        for cfg in cases {
            assert!(
                matches!(generate_world(&cfg), Err(SynthError::InvalidConfig(_))),
                "{cfg:?}"
            );
        }
    }
}
