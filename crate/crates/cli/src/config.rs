//! Layered configuration: defaults, then a TOML file, then `UNIFGVC_*`
//! environment variables, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use fgvr_core::captioner::ChatBackendDescriptor;
use fgvr_core::{EncoderDescriptor, ExperimentConfig, Modality, RetryPolicy};
use figment::providers::{Env, Format, Serialized, Toml};
use figment::Figment;
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const ENV_PREFIX: &str = "UNIFGVC_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendsConfig {
    pub image_encoder: EncoderDescriptor,
    pub text_encoder: EncoderDescriptor,
    pub chat: ChatBackendDescriptor,
    pub retry: RetryPolicy,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            image_encoder: EncoderDescriptor::mock(Modality::Image, "mock-image", 64),
            text_encoder: EncoderDescriptor::mock(Modality::Text, "mock-text", 64),
            chat: ChatBackendDescriptor::mock("fixture"),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    /// Single source of randomness for shot sampling and random references.
    pub seed: u64,
    pub max_in_flight: usize,
    pub manifest: Option<PathBuf>,
    /// Description cache file; in memory when unset.
    pub cache: Option<PathBuf>,
    /// Prompt template file; built-in templates when unset.
    pub templates: Option<PathBuf>,
    pub backends: BackendsConfig,
    pub experiment: ExperimentConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_in_flight: 8,
            manifest: None,
            cache: None,
            templates: None,
            backends: BackendsConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl AppConfig {
    /// Reads the optional config file and the environment. Nested keys in
    /// variables are separated by `__`, e.g.
    /// `UNIFGVC_EXPERIMENT__PIPELINE__S=5`.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let mut fig = Figment::from(Serialized::defaults(AppConfig::default()));
        if let Some(p) = path {
            if !p.is_file() {
                return Err(UsageError(format!("config file {} not found", p.display())).into());
            }
            fig = fig.merge(Toml::file(p));
        }
        fig = fig.merge(Env::prefixed(ENV_PREFIX).split("__"));
        let mut cfg: AppConfig = fig
            .extract()
            .map_err(|e| UsageError(format!("invalid configuration: {e}")))
            .context("loading configuration")?;
        cfg.sync_seed();
        Ok(cfg)
    }

    /// Copies the global seed into the experiment.
    pub fn sync_seed(&mut self) {
        self.experiment.pipeline.seed = self.seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
