use std::collections::{BTreeSet, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use sha2::{Digest, Sha256};

use super::SynthWorld;
use crate::captioner::{ChatBackend, ChatBackendDescriptor, ChatError, ChatRequest, Stage};
use crate::encoders::tokenize;
use crate::pipeline::sample_rng;

const FILLER: &str = "ordinary";

/// Mock MLLM that answers from the world's latent attribute table.
///
/// Region discovery ranks the target class's regions by how many reference
/// images belong to classes carrying the same token, fewest first, so
/// references from confusable classes steer it toward distinguishing
/// regions. Ties are ordered by a per-sample random permutation. Each region
/// description is the latent token, a random off-class token with
/// probability `hallucination_rate`, or filler with probability
/// `genericity_rate`.
pub struct SynthMllm {
    desc: ChatBackendDescriptor,
    world: SynthWorld,
    class_of: HashMap<String, usize>,
    region_of: HashMap<String, usize>,
    vocab: BTreeSet<String>,
}

impl SynthMllm {
    pub fn new(world: SynthWorld) -> Self {
        let digest = Sha256::digest(serde_json::to_vec(&world.config).expect("config serializes"));
        let desc = ChatBackendDescriptor::mock(format!("synth-mllm-{}", &hex::encode(digest)[..12]));
        let class_index: HashMap<&str, usize> = world
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.label.as_str(), i))
            .collect();
        let class_of = world
            .samples
            .iter()
            .map(|s| (s.id.clone(), class_index[s.label.as_str()]))
            .collect();
        let region_of = world
            .regions
            .iter()
            .enumerate()
            .map(|(i, r)| (r.to_lowercase(), i))
            .collect();
        let vocab = world.vocab.iter().cloned().collect();
        Self {
            desc,
            world,
            class_of,
            region_of,
            vocab,
        }
    }

    pub fn world(&self) -> &SynthWorld {
        &self.world
    }

    fn class(&self, key: &str) -> Result<usize, ChatError> {
        self.class_of
            .get(key)
            .copied()
            .ok_or_else(|| ChatError::UnknownSample(key.to_string()))
    }

    fn seed(&self) -> u64 {
        self.world.config.seed
    }

    /// The latent token, possibly corrupted.
    fn emit(&self, sample: &str, purpose: &str, class: usize, token: &str) -> String {
        let cfg = &self.world.config;
        let mut rng = sample_rng(self.seed(), purpose, sample);
        let u: f64 = rng.random();
        if u < cfg.hallucination_rate {
            let own = self.world.classes[class].token_set();
            let off: Vec<&String> = self.world.vocab.iter().filter(|t| !own.contains(t.as_str())).collect();
            off.choose(&mut rng).map_or(FILLER.to_string(), |t| t.to_string())
        } else if u < cfg.hallucination_rate + cfg.genericity_rate {
            FILLER.to_string()
        } else {
            token.to_string()
        }
    }

    fn vocab_tokens<'a>(&self, texts: impl IntoIterator<Item = &'a String>) -> Vec<String> {
        let mut seen = BTreeSet::new();
        texts
            .into_iter()
            .flat_map(|t| tokenize(t).collect::<Vec<_>>())
            .filter(|t| self.vocab.contains(t) && seen.insert(t.clone()))
            .collect()
    }

    fn discover(&self, target: &str, s: usize, references: &[String]) -> Result<String, ChatError> {
        let class = &self.world.classes[self.class(target)?];
        let ref_sets = references
            .iter()
            .map(|r| Ok(self.world.classes[self.class(r)?].token_set()))
            .collect::<Result<Vec<_>, ChatError>>()?;
        let mut order: Vec<usize> = (0..class.tokens.len()).collect();
        order.shuffle(&mut sample_rng(self.seed(), "discover-order", target));
        let rank: Vec<usize> = {
            let mut r = vec![0; order.len()];
            for (pos, &region) in order.iter().enumerate() {
                r[region] = pos;
            }
            r
        };
        let shared = |region: usize| {
            ref_sets
                .iter()
                .filter(|set| set.contains(class.tokens[region].as_str()))
                .count()
        };
        let mut regions: Vec<usize> = (0..class.tokens.len()).collect();
        regions.sort_by_key(|&r| (shared(r), rank[r]));
        Ok(regions
            .into_iter()
            .take(s)
            .enumerate()
            .map(|(i, r)| format!("{}. {}", i + 1, self.world.regions[r]))
            .collect::<Vec<_>>()
            .join("\n"))
    }

    fn describe(&self, target: &str, region: &str) -> Result<String, ChatError> {
        let c = self.class(target)?;
        let Some(&r) = self.region_of.get(&region.trim().to_lowercase()) else {
            return Ok(format!("The {region} looks {FILLER}."));
        };
        let token = &self.world.classes[c].tokens[r];
        let purpose = format!("describe\0{}", self.world.regions[r]);
        Ok(format!("The {region} is {}.", self.emit(target, &purpose, c, token)))
    }

    fn summarize(&self, regions: &[String], attributes: &[String]) -> String {
        let parts: Vec<String> = regions
            .iter()
            .zip(attributes)
            .filter_map(|(r, a)| {
                let toks = self.vocab_tokens([a]);
                (!toks.is_empty()).then(|| format!("{r}: {}", toks.join(" ")))
            })
            .collect();
        if parts.is_empty() {
            "No distinctive attributes are visible.".into()
        } else {
            parts.join("; ")
        }
    }

    fn naive(&self, target: &str, superclass: &str) -> Result<String, ChatError> {
        let c = self.class(target)?;
        let tokens = &self.world.classes[c].tokens;
        let mut rng = sample_rng(self.seed(), "naive-pick", target);
        let token = tokens.choose(&mut rng).expect("classes have at least one region");
        Ok(format!("A {superclass} with {}.", self.emit(target, "naive", c, token)))
    }
}

impl ChatBackend for SynthMllm {
    fn descriptor(&self) -> &ChatBackendDescriptor {
        &self.desc
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ChatError> {
        let target = request.target.key.as_str();
        match &request.stage {
            Stage::Discover { s, references, .. } => {
                let keys: Vec<String> = references.iter().map(|r| r.key.clone()).collect();
                self.discover(target, *s, &keys)
            }
            Stage::Describe { region, .. } => self.describe(target, region),
            Stage::Summarize {
                regions, attributes, ..
            } => {
                self.class(target)?;
                Ok(self.summarize(regions, attributes))
            }
            Stage::Naive { superclass } => self.naive(target, superclass),
            Stage::Aggregate { summaries, .. } => {
                let toks = self.vocab_tokens(summaries);
                Ok(if toks.is_empty() {
                    "No distinctive attributes are visible.".into()
                } else {
                    toks.join(", ")
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::{Captioner, PromptTemplates};
    use crate::content::ContentRef;
    use crate::synth::{generate_world, SynthWorldConfig};

    fn world(h: f64) -> SynthWorld {
        generate_world(&SynthWorldConfig {
            hallucination_rate: h,
            ..Default::default()
        })
        .unwrap()
    }

    fn tokens_of(m: &SynthMllm, text: &str) -> BTreeSet<String> {
        m.vocab_tokens([&text.to_string()]).into_iter().collect()
    }

    #[test]
    fn clean_descriptions_carry_latent_tokens() {
        let m = world(0.0).mllm();
        let t = PromptTemplates::default();
        let cap = Captioner::new(&m, &t, None);
        for s in m.world().samples.iter().step_by(17) {
            let class = m.world().class(&s.label).unwrap();
            let d = cap
                .caption(&ContentRef::from_key(s.id.clone()), &[], "bird", 3)
                .unwrap();
            for (region, attr) in d.regions.iter().zip(&d.region_attributes) {
                let r = m.world().regions.iter().position(|x| x == region).unwrap();
                assert!(attr.contains(&class.tokens[r]));
            }
            let attr_tokens: BTreeSet<String> = d.region_attributes.iter().flat_map(|a| tokens_of(&m, a)).collect();
            assert!(tokens_of(&m, &d.summary).is_subset(&attr_tokens));
        }
    }

    #[test]
    fn full_hallucination_never_emits_latent_tokens() {
        let m = world(1.0).mllm();
        let t = PromptTemplates::default();
        let cap = Captioner::new(&m, &t, None);
        for s in m.world().samples.iter().step_by(13) {
            let own: BTreeSet<String> = m.world().class(&s.label).unwrap().tokens.iter().cloned().collect();
            let d = cap
                .caption(&ContentRef::from_key(s.id.clone()), &[], "bird", 4)
                .unwrap();
            assert!(tokens_of(&m, &d.summary).is_disjoint(&own));
            let naive = cap.naive_caption(&ContentRef::from_key(s.id.clone()), "bird").unwrap();
            assert!(tokens_of(&m, &naive.summary).is_disjoint(&own));
        }
    }

    #[test]
    fn discover_avoids_tokens_of_nearest_classes() {
        let m = world(0.0).mllm();
        let w = m.world();
        let n = w.classes.len();
        let target = "class-03-000";
        let refs = [
            format!("{}-000", w.classes[2].label),
            format!("{}-000", w.classes[4].label),
        ];
        let reply = m.discover(target, 3, &refs).unwrap();
        let own = &w.classes[3];
        let excluded: BTreeSet<&str> = w.classes[2]
            .token_set()
            .union(&w.classes[4].token_set())
            .copied()
            .collect();
        let distinct: Vec<&str> = own
            .tokens
            .iter()
            .map(String::as_str)
            .filter(|t| !excluded.contains(t))
            .collect();
        assert_eq!(distinct.len(), w.config.attrs_per_class - 2 * w.config.overlap);
        for line in reply.lines() {
            let region = line.split_once(". ").unwrap().1;
            let r = w.regions.iter().position(|x| x == region).unwrap();
            assert!(
                distinct.contains(&own.tokens[r].as_str()),
                "{region} is shared with a reference"
            );
        }
        assert!(n > 4);
    }

    #[test]
    fn unknown_sample() {
        let m = world(0.0).mllm();
        let t = PromptTemplates::default();
        let cap = Captioner::new(&m, &t, None);
        assert!(matches!(
            cap.caption(&ContentRef::from_key("nope"), &[], "bird", 2),
            Err(crate::captioner::CaptionError::Chat(ChatError::UnknownSample(_)))
        ));
    }
}
