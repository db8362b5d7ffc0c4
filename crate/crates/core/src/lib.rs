//! Few-shot fine-grained classification by retrieval over fused image and
//! reference-guided description embeddings.

pub mod backends;
pub mod captioner;
pub mod content;
pub mod encoders;
pub mod gallery;
pub mod harness;
mod http;
pub mod parallel;
pub mod pipeline;
pub mod retrieval;
pub mod selector;
pub mod synth;

pub use captioner::{Captioner, ChatBackend, DescriptionCache, PromptTemplates, StructuredDescription};
pub use content::{ContentRef, ContentSource};
pub use encoders::{EmbeddingVector, Encoder, EncoderDescriptor, EncoderKind, Modality};
pub use gallery::{build_gallery, insert_category, load_gallery, save_gallery, FusionConfig, Gallery};
pub use harness::{evaluate, EvalReport, ExperimentConfig, Manifest, ManifestRecord, Split};
pub use http::{HttpError, RetryPolicy};
pub use pipeline::{CaptionMode, Pipeline, PipelineConfig, Sample, TextMode};
pub use retrieval::{classify, AffinityResult, Aggregation, RetrievalConfig};
pub use selector::{ClassCenter, ReferenceSet, RepresentativeRule};
