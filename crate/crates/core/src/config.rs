//! JSON run configuration.
//!
//! ```json
//! {
//!   "method": "Membox",
//!   "backend": {"kind": "scripted", "script": "script.json"},
//!   "embedder": {"kind": "hash", "dim": 64},
//!   "retry": {"max_attempts": 3, "base_delay_ms": 500},
//!   "retrieval": {"top_k": 5, "text_mode": "content", "aggregation": "max"},
//!   "loom": {"fail_open": true, "link_on_seal": true}
//! }
//! ```
//!
//! Relative paths resolve against the config file's directory. API keys are
//! never stored in the file, only the name of the environment variable holding them.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingError, Embedder, HashEmbedder, ScriptedEmbedder};
use crate::eval::{CategoryMap, EvalConfig};
use crate::gateway::live::{EndpointConfig, OpenAiChat, OpenAiEmbedder};
use crate::gateway::{BackendError, EchoBackend, Gateway, RetryPolicy, ScriptError, ScriptedBackend};
use crate::loom::LoomConfig;
use crate::retrieval::RetrievalConfig;

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const DEFAULT_HASH_DIM: usize = 64;

fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Scripted {
        script: PathBuf,
    },
    Live {
        endpoint: EndpointConfig,
        #[serde(default = "default_key_env")]
        api_key_env: String,
    },
    /// Returns prompts verbatim; only useful for smoke tests.
    Echo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderConfig {
    Hash {
        dim: usize,
    },
    /// JSON `{"dim": n, "vectors": {"text": [..]}}`; unlisted texts fall back to hashing.
    Table {
        path: PathBuf,
    },
    Live {
        endpoint: EndpointConfig,
        #[serde(default = "default_key_env")]
        api_key_env: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryConfig {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl From<RetryConfig> for RetryPolicy {
    fn from(r: RetryConfig) -> Self {
        RetryPolicy {
            max_attempts: r.max_attempts.max(1),
            base_delay: Duration::from_millis(r.base_delay_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_method")]
    pub method: String,
    #[serde(default = "default_backend")]
    pub backend: BackendConfig,
    #[serde(default = "default_embedder")]
    pub embedder: EmbedderConfig,
    /// Overrides the backend's own retry policy (scripted backends never retry by default).
    #[serde(default)]
    pub retry: Option<RetryConfig>,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub loom: LoomConfig,
    #[serde(default)]
    pub category_map: CategoryMap,
    /// Worker threads for build and eval; 0 uses all cores.
    #[serde(default)]
    pub jobs: usize,
}

fn default_method() -> String {
    "Membox".to_string()
}

fn default_backend() -> BackendConfig {
    BackendConfig::Echo
}

fn default_embedder() -> EmbedderConfig {
    EmbedderConfig::Hash {
        dim: DEFAULT_HASH_DIM,
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            method: default_method(),
            backend: default_backend(),
            embedder: default_embedder(),
            retry: None,
            retrieval: RetrievalConfig::default(),
            loom: LoomConfig::default(),
            category_map: CategoryMap::default(),
            jobs: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: Config = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let BackendConfig::Scripted { script } = &mut self.backend {
            fix(script);
        }
        if let EmbedderConfig::Table { path } = &mut self.embedder {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.retrieval.top_k == 0 {
            return Err(ConfigError::Invalid("retrieval.top_k must be at least 1".into()));
        }
        if let EmbedderConfig::Hash { dim: 0 } = self.embedder {
            return Err(ConfigError::Invalid("embedder.dim must be at least 1".into()));
        }
        Ok(())
    }

    /// A fresh gateway with its own backend instance, so scripted ordinals
    /// start from zero for every conversation.
    pub fn gateway(&self) -> Result<Gateway, ConfigError> {
        let gw = match &self.backend {
            BackendConfig::Scripted { script } => Gateway::new(Arc::new(ScriptedBackend::from_file(script)?)),
            BackendConfig::Live {
                endpoint,
                api_key_env,
            } => Gateway::new(Arc::new(OpenAiChat::new(endpoint.clone(), api_key(api_key_env))?)),
            BackendConfig::Echo => Gateway::new(Arc::new(EchoBackend)),
        };
        Ok(match self.retry {
            Some(r) => gw.with_retry(r.into()),
            None => gw,
        })
    }

    pub fn embedder(&self) -> Result<Embedder, ConfigError> {
        let e = match &self.embedder {
            EmbedderConfig::Hash { dim } => Embedder::new(Arc::new(HashEmbedder::new(*dim))),
            EmbedderConfig::Table { path } => Embedder::new(Arc::new(ScriptedEmbedder::from_file(path)?)),
            EmbedderConfig::Live {
                endpoint,
                api_key_env,
            } => Embedder::new(Arc::new(OpenAiEmbedder::new(endpoint.clone(), api_key(api_key_env))?)),
        };
        Ok(match self.retry {
            Some(r) => e.with_retry(r.into()),
            None => e,
        })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            method: self.method.clone(),
            retrieval: self.retrieval,
            jobs: self.jobs,
        }
    }
}

fn api_key(var: &str) -> Option<String> {
    let key = std::env::var(var).ok().filter(|k| !k.is_empty());
    if key.is_none() {
        log::warn!("{var} is not set; sending requests without an API key");
    }
    key
}
