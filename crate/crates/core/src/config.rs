//! TOML run configuration. Every section and key is optional; unknown keys
//! are rejected so typos surface as errors. API keys are never read from
//! here, only the names of the environment variables holding them.
//!
//! ```toml
//! [rollout]
//! max_turns = 8
//! max_tool_calls = 6
//! per_tool_timeout_secs = 10.0
//! search_k = 5
//! snippet_char_cap = 400
//!
//! [model]
//! endpoint = "https://api.openai.com/v1/chat/completions"
//! model = "gpt-4o"
//! api_key_env = "OPENAI_API_KEY"
//!
//! [search]
//! endpoint = "https://google.serper.dev/search"
//! api_key_env = "SERPER_API_KEY"
//!
//! [embedding]
//! endpoint = "http://localhost:8080/embed"
//! api_key_env = "EMBED_API_KEY"
//!
//! [worker]
//! program = "python3"
//! args = ["-m", "code_worker"]
//! pool_size = 2
//!
//! [grpo]
//! learning_rate = 2.0
//! updates = 500
//!
//! [bench]
//! master_seed = 0
//! composite = 90
//! crop = 40
//! ```

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::GrpoConfig;
use crate::http::HttpError;
use crate::reward::RemoteEmbedder;
use crate::rollout::{ChatConfig, RolloutConfig};
use crate::sandbox::WorkerConfig;
use crate::search::SerperConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub endpoint: String,
    pub api_key_env: String,
    #[serde(default = "default_embed_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub retries: u32,
}

fn default_embed_timeout() -> f64 {
    30.0
}

impl EmbeddingConfig {
    pub fn build(&self) -> Result<RemoteEmbedder, HttpError> {
        RemoteEmbedder::new(
            &self.endpoint,
            &self.api_key_env,
            Duration::from_secs_f64(self.timeout_secs),
            self.retries,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub master_seed: u64,
    /// Hard-split quotas of the test plan.
    pub composite: usize,
    pub crop: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            composite: 90,
            crop: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub rollout: RolloutConfig,
    pub model: ChatConfig,
    pub search: SerperConfig,
    pub embedding: Option<EmbeddingConfig>,
    pub worker: Option<WorkerConfig>,
    pub grpo: GrpoConfig,
    pub bench: BenchConfig,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: toml::de::Error,
    },
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })
    }
}
