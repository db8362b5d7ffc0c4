//! Reference-guided chain-of-thought captioning.
//!
//! A caption is produced in three strictly sequential backend steps:
//! region discovery against the reference images, one attribute description
//! per region, and a summary that re-attaches the target image. Results are
//! cached by sample, backend, templates, region count and reference ids.

mod backend;
mod cache;
mod parse;
mod templates;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use backend::{
    response_text, ChatBackend, ChatBackendDescriptor, ChatBackendKind, ChatError, ChatRequest, ContentPart,
    CountingBackend, FixtureChatBackend, RemoteChatBackend, Stage,
};
pub use cache::{cache_key, CacheRecord, DescriptionCache};
pub use parse::{parse_region_list, MAX_REGION_WORDS};
pub use templates::{render, Binding, PromptTemplates, TemplateError};

use crate::content::ContentRef;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredDescription {
    pub sample_id: String,
    pub superclass: String,
    pub regions: Vec<String>,
    pub region_attributes: Vec<String>,
    pub summary: String,
    pub backend_id: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CaptionError {
    #[error("expected {expected} regions, backend returned {got}")]
    RegionCountMismatch { expected: usize, got: usize },
    #[error("no region list found in reply: {0:?}")]
    ParseFailure(String),
    #[error("empty response at {0} step")]
    EmptyResponse(&'static str),
    #[error(transparent)]
    Chat(#[from] ChatError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("description cache line {line}: {reason}")]
    CacheInvalid { line: usize, reason: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CaptionError {
    pub fn is_unavailable(&self) -> bool {
        matches!(self, CaptionError::Chat(ChatError::BackendUnavailable(_)))
    }
}

/// Drives a chat backend through the captioning chain.
pub struct Captioner<'a> {
    backend: &'a dyn ChatBackend,
    templates: &'a PromptTemplates,
    cache: Option<&'a DescriptionCache>,
    template_hash: String,
}

impl<'a> Captioner<'a> {
    pub fn new(
        backend: &'a dyn ChatBackend,
        templates: &'a PromptTemplates,
        cache: Option<&'a DescriptionCache>,
    ) -> Self {
        Self {
            backend,
            templates,
            cache,
            template_hash: templates.hash(),
        }
    }

    pub fn template_hash(&self) -> &str {
        &self.template_hash
    }

    pub fn backend_id(&self) -> String {
        self.backend.backend_id()
    }

    fn ask(
        &self,
        stage: Stage,
        target: &ContentRef,
        template: &str,
        bindings: &HashMap<&str, Binding>,
    ) -> Result<String, CaptionError> {
        let parts = render(template, bindings)?;
        let request = ChatRequest {
            stage,
            target: target.clone(),
            parts,
        };
        Ok(self.backend.complete(&request)?)
    }

    /// Asks for `s` discriminative region names. With no references the
    /// reference-free discover template is used. One stricter reprompt is
    /// issued if the first reply does not parse to exactly `s` names.
    pub fn discover_regions(
        &self,
        target: &ContentRef,
        references: &[ContentRef],
        superclass: &str,
        s: usize,
    ) -> Result<Vec<String>, CaptionError> {
        if s == 0 {
            return Err(CaptionError::InvalidInput("region count s must be at least 1".into()));
        }
        let mut bindings: HashMap<&str, Binding> = HashMap::new();
        bindings.insert("SUPERCLASS", superclass.into());
        bindings.insert("s", s.to_string().into());
        bindings.insert("t", references.len().to_string().into());
        bindings.insert("IMAGE", Binding::Images(vec![target.clone()]));
        let mut imagery = references.to_vec();
        imagery.push(target.clone());
        bindings.insert("IMAGERY", Binding::Images(imagery));
        let base = if references.is_empty() {
            &self.templates.discover_no_ref
        } else {
            &self.templates.discover
        };

        let stage = |strict| Stage::Discover {
            s,
            superclass: superclass.to_string(),
            references: references.to_vec(),
            strict,
        };
        let first = self.ask(stage(false), target, base, &bindings)?;
        if let Some(regions) = parse_region_list(&first).filter(|r| r.len() == s) {
            return Ok(regions);
        }
        let strict_template = format!("{base}{}", self.templates.strict_suffix);
        let second = self.ask(stage(true), target, &strict_template, &bindings)?;
        match parse_region_list(&second) {
            Some(r) if r.len() == s => Ok(r),
            Some(r) => Err(CaptionError::RegionCountMismatch {
                expected: s,
                got: r.len(),
            }),
            None => Err(CaptionError::ParseFailure(second)),
        }
    }

    /// Describes one region of the target. The reply is trimmed and capped at
    /// the backend's `max_tokens` whitespace-separated words.
    pub fn describe_region(&self, target: &ContentRef, superclass: &str, region: &str) -> Result<String, CaptionError> {
        if region.trim().is_empty() {
            return Err(CaptionError::InvalidInput("empty region name".into()));
        }
        let mut bindings: HashMap<&str, Binding> = HashMap::new();
        bindings.insert("IMAGE", Binding::Images(vec![target.clone()]));
        bindings.insert("SUPERCLASS", superclass.into());
        bindings.insert("REGION", region.into());
        let reply = self.ask(
            Stage::Describe {
                superclass: superclass.to_string(),
                region: region.to_string(),
            },
            target,
            &self.templates.describe,
            &bindings,
        )?;
        let reply = reply.trim();
        if reply.is_empty() {
            return Err(CaptionError::EmptyResponse("describe"));
        }
        let cap = self.backend.descriptor().max_tokens.max(1);
        if reply.split_whitespace().count() > cap {
            return Ok(reply.split_whitespace().take(cap).collect::<Vec<_>>().join(" "));
        }
        Ok(reply.to_string())
    }

    /// Merges the region descriptions into one summary. Only the target image
    /// is attached.
    pub fn summarize(
        &self,
        target: &ContentRef,
        superclass: &str,
        regions: &[String],
        attributes: &[String],
    ) -> Result<String, CaptionError> {
        if regions.len() != attributes.len() || regions.is_empty() {
            return Err(CaptionError::InvalidInput(format!(
                "{} regions but {} attribute descriptions",
                regions.len(),
                attributes.len()
            )));
        }
        let listing = regions
            .iter()
            .zip(attributes)
            .map(|(r, a)| format!("- {r}: {a}"))
            .collect::<Vec<_>>()
            .join("\n");
        let mut bindings: HashMap<&str, Binding> = HashMap::new();
        bindings.insert("IMAGE", Binding::Images(vec![target.clone()]));
        bindings.insert("SUPERCLASS", superclass.into());
        bindings.insert("REGIONS", regions.join(", ").into());
        bindings.insert("ATTRIBUTES", listing.into());
        let reply = self.ask(
            Stage::Summarize {
                superclass: superclass.to_string(),
                regions: regions.to_vec(),
                attributes: attributes.to_vec(),
            },
            target,
            &self.templates.summarize,
            &bindings,
        )?;
        let reply = reply.trim();
        if reply.is_empty() {
            return Err(CaptionError::EmptyResponse("summarize"));
        }
        Ok(reply.to_string())
    }

    fn cached(&self, key: &str) -> Option<StructuredDescription> {
        self.cache.and_then(|c| c.get(key)).map(|r| r.description())
    }

    fn store(&self, key: String, d: &StructuredDescription) -> Result<(), CaptionError> {
        if let Some(c) = self.cache {
            c.put(CacheRecord::new(key, &self.template_hash, d))?;
        }
        Ok(())
    }

    /// Full chain: discover, describe each region, summarize. A cache hit
    /// returns without contacting the backend.
    pub fn caption(
        &self,
        target: &ContentRef,
        references: &[ContentRef],
        superclass: &str,
        s: usize,
    ) -> Result<StructuredDescription, CaptionError> {
        let ref_ids: Vec<String> = references.iter().map(|r| r.id.clone()).collect();
        let key = cache_key(&target.id, &self.backend_id(), &self.template_hash, s, &ref_ids);
        if let Some(hit) = self.cached(&key) {
            return Ok(hit);
        }
        let regions = self.discover_regions(target, references, superclass, s)?;
        let attributes = regions
            .iter()
            .map(|r| self.describe_region(target, superclass, r))
            .collect::<Result<Vec<_>, _>>()?;
        let summary = self.summarize(target, superclass, &regions, &attributes)?;
        let d = StructuredDescription {
            sample_id: target.id.clone(),
            superclass: superclass.to_string(),
            regions,
            region_attributes: attributes,
            summary,
            backend_id: self.backend_id(),
        };
        self.store(key, &d)?;
        Ok(d)
    }

    /// One-prompt description with no regions and no references.
    pub fn naive_caption(&self, target: &ContentRef, superclass: &str) -> Result<StructuredDescription, CaptionError> {
        let key = cache_key(&target.id, &self.backend_id(), &self.template_hash, 0, &[]);
        if let Some(hit) = self.cached(&key) {
            return Ok(hit);
        }
        let mut bindings: HashMap<&str, Binding> = HashMap::new();
        bindings.insert("IMAGE", Binding::Images(vec![target.clone()]));
        bindings.insert("SUPERCLASS", superclass.into());
        let reply = self.ask(
            Stage::Naive {
                superclass: superclass.to_string(),
            },
            target,
            &self.templates.naive,
            &bindings,
        )?;
        let reply = reply.trim();
        if reply.is_empty() {
            return Err(CaptionError::EmptyResponse("naive"));
        }
        let d = StructuredDescription {
            sample_id: target.id.clone(),
            superclass: superclass.to_string(),
            regions: Vec::new(),
            region_attributes: Vec::new(),
            summary: reply.to_string(),
            backend_id: self.backend_id(),
        };
        self.store(key, &d)?;
        Ok(d)
    }

    /// Category-level text from the summaries of one class's samples. A single
    /// summary is returned as is; otherwise one extra backend call merges them.
    pub fn aggregate(&self, label: &str, superclass: &str, summaries: &[String]) -> Result<String, CaptionError> {
        match summaries {
            [] => return Err(CaptionError::InvalidInput(format!("class {label} has no descriptions"))),
            [only] => return Ok(only.clone()),
            _ => {}
        }
        let class_id = format!("class:{label}");
        let key = cache_key(
            &class_id,
            &self.backend_id(),
            &self.template_hash,
            summaries.len(),
            summaries,
        );
        if let Some(hit) = self.cached(&key) {
            return Ok(hit.summary);
        }
        let mut bindings: HashMap<&str, Binding> = HashMap::new();
        bindings.insert("SUPERCLASS", superclass.into());
        bindings.insert(
            "SUMMARIES",
            summaries
                .iter()
                .map(|s| format!("- {s}"))
                .collect::<Vec<_>>()
                .join("\n")
                .into(),
        );
        let target = ContentRef::from_key(class_id.clone());
        let reply = self.ask(
            Stage::Aggregate {
                superclass: superclass.to_string(),
                label: label.to_string(),
                summaries: summaries.to_vec(),
            },
            &target,
            &self.templates.aggregate,
            &bindings,
        )?;
        let reply = reply.trim();
        if reply.is_empty() {
            return Err(CaptionError::EmptyResponse("aggregate"));
        }
        let d = StructuredDescription {
            sample_id: class_id,
            superclass: superclass.to_string(),
            regions: Vec::new(),
            region_attributes: Vec::new(),
            summary: reply.to_string(),
            backend_id: self.backend_id(),
        };
        self.store(key, &d)?;
        Ok(d.summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Replies from a queue of canned strings per stage kind.
    struct Scripted {
        desc: ChatBackendDescriptor,
        discover: Mutex<Vec<String>>,
        describe: String,
        summary: String,
        log: Mutex<Vec<ChatRequest>>,
    }

    impl Scripted {
        fn new(discover: &[&str]) -> Self {
            Self {
                desc: ChatBackendDescriptor::mock("scripted"),
                discover: Mutex::new(discover.iter().rev().map(|s| s.to_string()).collect()),
                describe: "a description".into(),
                summary: "a summary".into(),
                log: Mutex::new(Vec::new()),
            }
        }
    }

    impl ChatBackend for Scripted {
        fn descriptor(&self) -> &ChatBackendDescriptor {
            &self.desc
        }
        fn complete(&self, r: &ChatRequest) -> Result<String, ChatError> {
            self.log.lock().unwrap().push(r.clone());
            Ok(match r.stage {
                Stage::Discover { .. } => self.discover.lock().unwrap().pop().unwrap_or_default(),
                Stage::Describe { .. } => self.describe.clone(),
                _ => self.summary.clone(),
            })
        }
    }

    fn target() -> ContentRef {
        ContentRef::from_key("dog-1")
    }

    #[test]
    fn discover_parses_inline_list() {
        let b = Scripted::new(&["1. white fur 2. upright ears 3. softly angular face"]);
        let t = PromptTemplates::default();
        let c = Captioner::new(&b, &t, None);
        let refs = vec![ContentRef::from_key("r1"), ContentRef::from_key("r2")];
        let regions = c.discover_regions(&target(), &refs, "dog", 3).unwrap();
        assert_eq!(regions, vec!["white fur", "upright ears", "softly angular face"]);

        let log = b.log.lock().unwrap();
        let imgs: Vec<_> = log[0].images().map(|c| c.id.as_str()).collect();
        assert_eq!(imgs, vec!["r1", "r2", "dog-1"], "references first, target last");
        assert!(log[0].text().contains("We provide 2 images"));
        assert!(log[0].text().contains("generate 3 discriminative"));
    }

    #[test]
    fn discover_single_region() {
        let b = Scripted::new(&["1. white fur"]);
        let t = PromptTemplates::default();
        let c = Captioner::new(&b, &t, None);
        assert_eq!(c.discover_regions(&target(), &[], "dog", 1).unwrap(), vec!["white fur"]);
    }

    #[test]
    fn discover_reprompts_once_then_fails() {
        let b = Scripted::new(&["1. a 2. b", "1. a 2. b"]);
        let t = PromptTemplates::default();
        let c = Captioner::new(&b, &t, None);
        match c.discover_regions(&target(), &[], "dog", 3) {
            Err(CaptionError::RegionCountMismatch { expected: 3, got: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let log = b.log.lock().unwrap();
        assert_eq!(log.len(), 2);
        assert!(matches!(log[1].stage, Stage::Discover { strict: true, .. }));
        assert!(log[1].text().contains("exactly 3 region names"));
    }

    #[test]
    fn discover_recovers_on_reprompt() {
        let b = Scripted::new(&["I see a dog.", "1. a 2. b 3. c"]);
        let t = PromptTemplates::default();
        let c = Captioner::new(&b, &t, None);
        assert_eq!(c.discover_regions(&target(), &[], "dog", 3).unwrap().len(), 3);
    }

    #[test]
    fn discover_unparseable_twice() {
        let b = Scripted::new(&["", "   "]);
        let t = PromptTemplates::default();
        let c = Captioner::new(&b, &t, None);
        assert!(matches!(
            c.discover_regions(&target(), &[], "dog", 2),
            Err(CaptionError::ParseFailure(_))
        ));
    }

    #[test]
    fn empty_describe_is_error() {
        let mut b = Scripted::new(&[]);
        b.describe = "  ".into();
        let t = PromptTemplates::default();
        let c = Captioner::new(&b, &t, None);
        assert!(matches!(
            c.describe_region(&target(), "dog", "white fur"),
            Err(CaptionError::EmptyResponse("describe"))
        ));
    }

    #[test]
    fn describe_caps_at_max_tokens() {
        let mut b = Scripted::new(&[]);
        b.desc.max_tokens = 3;
        b.describe = "  one two three four five ".into();
        let t = PromptTemplates::default();
        let c = Captioner::new(&b, &t, None);
        assert_eq!(c.describe_region(&target(), "dog", "fur").unwrap(), "one two three");
    }

    #[test]
    fn summarize_attaches_only_target() {
        let b = Scripted::new(&[]);
        let t = PromptTemplates::default();
        let c = Captioner::new(&b, &t, None);
        c.summarize(&target(), "dog", &["fur".into()], &["white".into()])
            .unwrap();
        let log = b.log.lock().unwrap();
        assert_eq!(log[0].images().count(), 1);
        assert!(log[0].text().contains("- fur: white"));
    }

    #[test]
    fn fixture_summary_contains_every_region() {
        let b = FixtureChatBackend::new(ChatBackendDescriptor::mock("fixture"));
        let t = PromptTemplates::default();
        let c = Captioner::new(&b, &t, None);
        let d = c.caption(&target(), &[], "bird", 3).unwrap();
        assert_eq!(d.regions.len(), 3);
        for r in &d.regions {
            assert!(d.summary.contains(r.as_str()));
        }
        let single = c.caption(&ContentRef::from_key("x"), &[], "bird", 1).unwrap();
        assert_eq!(
            single.summary,
            format!("{}: {}", single.regions[0], single.region_attributes[0])
        );
    }

    #[test]
    fn call_counts_and_cache() {
        let b = CountingBackend::new(FixtureChatBackend::new(ChatBackendDescriptor::mock("fixture")));
        let t = PromptTemplates::default();
        let cache = DescriptionCache::in_memory();
        let c = Captioner::new(&b, &t, Some(&cache));
        let refs = vec![ContentRef::from_key("r1"), ContentRef::from_key("r2")];
        let first = c.caption(&target(), &refs, "dog", 3).unwrap();
        assert_eq!(b.reset(), 3 + 2);
        let again = c.caption(&target(), &refs, "dog", 3).unwrap();
        assert_eq!(b.reset(), 0);
        assert_eq!(first, again);

        let other_refs = vec![ContentRef::from_key("r1"), ContentRef::from_key("r9")];
        c.caption(&target(), &other_refs, "dog", 3).unwrap();
        assert_eq!(b.reset(), 5, "changed reference id must miss the cache");
    }

    #[test]
    fn aggregate_single_summary_needs_no_call() {
        let b = CountingBackend::new(FixtureChatBackend::new(ChatBackendDescriptor::mock("fixture")));
        let t = PromptTemplates::default();
        let c = Captioner::new(&b, &t, None);
        assert_eq!(c.aggregate("c", "dog", &["only".into()]).unwrap(), "only");
        assert_eq!(b.calls(), 0);
        assert_eq!(c.aggregate("c", "dog", &["a b".into(), "c".into()]).unwrap(), "a b c");
        assert_eq!(b.calls(), 1);
    }
}
