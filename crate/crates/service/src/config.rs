//! Operator configuration, read from a TOML file.
//!
//! Every section is optional. Relative paths are resolved against the
//! directory containing the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use trialmatch_core::corpus::Specialty;
use trialmatch_core::gateway::{ModelPrice, ProviderConfig};
use trialmatch_core::index::{ChunkingConfig, RetrievalConfig};
use trialmatch_core::orchestrator::Mode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Live,
    #[default]
    Scripted,
    Replay,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    #[serde(default)]
    pub kind: BackendKind,
    /// Rules file for the scripted backend.
    pub script: Option<PathBuf>,
    /// Cassette replayed by the replay backend.
    pub cassette: Option<PathBuf>,
    pub provider: Option<ProviderConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_model")]
    pub id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
    /// Price table file; takes precedence over `price`.
    pub prices: Option<PathBuf>,
    pub price: Option<ModelPrice>,
}

fn default_model() -> String {
    "scripted-model".into()
}

fn default_max_tokens() -> u32 {
    1024
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            id: default_model(),
            temperature: 0.0,
            max_output_tokens: default_max_tokens(),
            prices: None,
            price: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbeddingSection {
    Hash {
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
    Http {
        endpoint: String,
        model: String,
        dimension: usize,
        #[serde(default = "default_key_env")]
        api_key_env: String,
    },
}

fn default_dimension() -> usize {
    256
}

fn default_key_env() -> String {
    "TRIALMATCH_API_KEY".into()
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection::Hash {
            dimension: default_dimension(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TokenizerSection {
    /// Packaged byte-pair merges unless `vocab` names a merges file.
    Bpe { vocab: Option<PathBuf> },
    Whitespace,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection::Bpe { vocab: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrchestratorSection {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "yes")]
    pub skip_pi_on_unanimity: bool,
    #[serde(default)]
    pub parallel_criteria: bool,
    /// Prompt set file; the packaged set when absent.
    pub prompts: Option<PathBuf>,
}

fn yes() -> bool {
    true
}

impl Default for OrchestratorSection {
    fn default() -> Self {
        OrchestratorSection {
            mode: Mode::MultiExpert,
            skip_pi_on_unanimity: true,
            parallel_criteria: false,
            prompts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Pairs assessed concurrently.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Model calls in flight at once, across all pairs.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_parallelism() -> usize {
    4
}

fn default_in_flight() -> usize {
    8
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            parallelism: default_parallelism(),
            max_in_flight: default_in_flight(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriageSection {
    #[serde(default = "default_threshold")]
    pub threshold: usize,
}

fn default_threshold() -> usize {
    2
}

impl Default for TriageSection {
    fn default() -> Self {
        TriageSection {
            threshold: default_threshold(),
        }
    }
}

/// Replaces the default note-type routing when present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingSection {
    /// Checked in specialty declaration order.
    #[serde(default)]
    pub keywords: BTreeMap<Specialty, Vec<String>>,
    #[serde(default)]
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenEntry {
    /// Environment variable holding the bearer token.
    pub token_env: Option<String>,
    /// Literal token; intended for local testing only.
    pub token: Option<String>,
    pub reviewer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default)]
    pub tokens: Vec<TokenEntry>,
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            bind: default_bind(),
            tokens: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    /// Workspace directory holding the store and the knowledge-base log.
    pub workspace: Option<PathBuf>,
    /// Directory of protocol TOML files; the packaged six trials when absent.
    pub protocols: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
    #[serde(default)]
    pub chunking: ChunkingConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub orchestrator: OrchestratorSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub triage: TriageSection,
    pub routing: Option<RoutingSection>,
    #[serde(default)]
    pub server: ServerSection,
}

impl ServiceConfig {
    pub fn parse(source: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut c: ServiceConfig = toml::from_str(source).map_err(|e| ConfigError::Parse {
            path: base.to_path_buf(),
            message: e.to_string(),
        })?;
        c.resolve(base);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&source, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.workspace);
        fix(&mut self.protocols);
        fix(&mut self.model.prices);
        fix(&mut self.backend.script);
        fix(&mut self.backend.cassette);
        fix(&mut self.orchestrator.prompts);
        if let TokenizerSection::Bpe { vocab } = &mut self.tokenizer {
            fix(vocab);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.chunking
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.retrieval.k == 0 {
            return Err(ConfigError::Invalid("retrieval.k must be at least 1".into()));
        }
        if self.run.parallelism == 0 || self.run.max_in_flight == 0 {
            return Err(ConfigError::Invalid(
                "run.parallelism and run.max_in_flight must be at least 1".into(),
            ));
        }
        if self.triage.threshold == 0 {
            return Err(ConfigError::Invalid("triage.threshold must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&self.model.temperature) {
            return Err(ConfigError::Invalid("model.temperature must lie in [0, 2]".into()));
        }
        for t in &self.server.tokens {
            if t.token.is_none() == t.token_env.is_none() {
                return Err(ConfigError::Invalid(format!(
                    "token for reviewer `{}` needs exactly one of `token` and `token_env`",
                    t.reviewer
                )));
            }
        }
        Ok(())
    }

    /// Bearer token to reviewer id. Tokens whose variable is unset are skipped.
    pub fn resolve_tokens(&self) -> BTreeMap<String, String> {
        self.server
            .tokens
            .iter()
            .filter_map(|t| {
                let token = match (&t.token, &t.token_env) {
                    (Some(tok), _) => tok.clone(),
                    (None, Some(var)) => std::env::var(var).ok()?,
                    (None, None) => return None,
                };
                (!token.is_empty()).then(|| (token, t.reviewer.clone()))
            })
            .collect()
    }
}
