//! Pipeline configuration: a TOML file plus per-flag overrides. Secrets
//! never live here; the chat-service API key comes from the environment.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use ctp_core::embed::{EncoderProvider, HashingEncoder, RemoteEncoder, DEFAULT_DIM};
use ctp_core::forest::ForestParams;
use ctp_core::llmgate::ServiceConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Character budget for synthesized trial descriptions.
    pub char_budget: usize,
    pub paths: Paths,
    pub split: SplitRatios,
    pub encoder: EncoderSettings,
    pub forest: ForestSettings,
    pub llm: ServiceConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            char_budget: 16_000,
            paths: Paths::default(),
            split: SplitRatios::default(),
            encoder: EncoderSettings::default(),
            forest: ForestSettings::default(),
            llm: ServiceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub trials: Option<PathBuf>,
    pub tracker: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.65,
            validation: 0.15,
            test: 0.20,
        }
    }
}

impl SplitRatios {
    pub fn as_tuple(&self) -> (f64, f64, f64) {
        (self.train, self.validation, self.test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSettings {
    /// "hashing" or "remote".
    pub kind: String,
    pub dim: usize,
    /// Seed for the hashing encoder; falls back to the pipeline seed.
    pub hash_seed: Option<u64>,
    pub endpoint: String,
    pub model_id: String,
    pub batch_size: usize,
    pub max_parallel: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        EncoderSettings {
            kind: "hashing".to_string(),
            dim: DEFAULT_DIM,
            hash_seed: None,
            endpoint: "http://localhost:8090/embed".to_string(),
            model_id: "clinical-encoder".to_string(),
            batch_size: 32,
            max_parallel: 4,
            max_retries: 3,
            backoff_ms: 100,
            timeout_ms: 30_000,
        }
    }
}

impl EncoderSettings {
    pub fn provider(&self, pipeline_seed: u64) -> Result<EncoderProvider> {
        if self.dim == 0 {
            bail!("encoder dimension must be at least 1");
        }
        match self.kind.as_str() {
            "hashing" => Ok(EncoderProvider::Hashing(HashingEncoder {
                dim: self.dim,
                seed: self.hash_seed.unwrap_or(pipeline_seed),
            })),
            "remote" => Ok(EncoderProvider::Remote(RemoteEncoder {
                endpoint: self.endpoint.clone(),
                model_id: self.model_id.clone(),
                dim: self.dim,
                batch_size: self.batch_size,
                max_retries: self.max_retries,
                backoff_ms: self.backoff_ms,
                max_parallel: self.max_parallel,
                timeout_ms: self.timeout_ms,
            })),
            other => bail!("unknown encoder kind {other:?} (expected hashing or remote)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestSettings {
    pub trees: usize,
    pub bootstrap_size: Option<usize>,
    pub feature_subset_size: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
}

impl Default for ForestSettings {
    fn default() -> Self {
        ForestSettings {
            trees: 100,
            bootstrap_size: None,
            feature_subset_size: None,
            max_depth: None,
            min_leaf: 1,
        }
    }
}

impl ForestSettings {
    pub fn params(&self, seed: u64) -> ForestParams {
        ForestParams {
            tree_count: self.trees,
            seed,
            bootstrap_size: self.bootstrap_size,
            feature_subset_size: self.feature_subset_size,
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
        }
    }
}

/// Load a config file (or defaults) and apply the global seed override.
pub fn load(path: Option<&Path>, seed_override: Option<u64>) -> Result<PipelineConfig> {
    let mut config = match path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    let ratio_sum = config.split.train + config.split.validation + config.split.test;
    if (ratio_sum - 1.0).abs() > 1e-9 {
        bail!("split ratios must sum to 1, got {ratio_sum}");
    }
    Ok(config)
}
