//! Wiring from configuration to a ready-to-run assessment environment.

use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;
use trialmatch_core::corpus::{Corpus, RoutingError, Specialty, SpecialtyRouting};
use trialmatch_core::gateway::{
    CassetteBackend, CassetteError, ChatBackend, Gateway, HttpChatBackend, ModelPrice, PriceTable,
    PricingError, ScriptError, ScriptedBackend,
};
use trialmatch_core::index::{Embedder, HashEmbedder, HttpEmbedder};
use trialmatch_core::kb::KbSnapshot;
use trialmatch_core::orchestrator::{Mode, Orchestrator, OrchestratorConfig, PromptError, PromptSet};
use trialmatch_core::pipeline::RunEnv;
use trialmatch_core::protocol::{load_protocol_dir, ProtocolError, Trial};
use trialmatch_core::tokenize::{BpeTokenizer, Tokenizer, VocabError, WhitespaceTokenizer};

use crate::config::{BackendKind, EmbeddingSection, RoutingSection, ServiceConfig, TokenizerSection};

/// Price applied to models the table does not list. Nominal, so that
/// relative cost comparisons are meaningful without a price file.
pub const NOMINAL_PRICE: ModelPrice = ModelPrice {
    input_per_token: 2.5e-6,
    output_per_token: 1.0e-5,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("the {0:?} backend needs `{1}` (config or command line)")]
    MissingSetting(BackendKind, &'static str),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Cassette(#[from] CassetteError),
    #[error(transparent)]
    Pricing(#[from] PricingError),
    #[error(transparent)]
    Prompts(#[from] PromptError),
    #[error(transparent)]
    Protocols(#[from] ProtocolError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("embedding dimension must be positive")]
    Dimension,
}

/// Command-line adjustments applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct EngineOverrides {
    pub mode: Option<Mode>,
    pub backend: Option<BackendKind>,
    pub script: Option<PathBuf>,
    pub cassette: Option<PathBuf>,
    /// Record every completion of the selected backend to this cassette.
    pub record: Option<PathBuf>,
    pub parallelism: Option<usize>,
}

pub struct Engine {
    pub gateway: Gateway,
    pub embedder: Box<dyn Embedder>,
    pub orchestrator: OrchestratorConfig,
    pub tokenizer: Arc<dyn Tokenizer>,
    pub routing: SpecialtyRouting,
    pub chunking: trialmatch_core::index::ChunkingConfig,
    pub trials: Vec<Trial>,
    pub parallelism: usize,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("gateway", &self.gateway)
            .field("embedder", &self.embedder.id())
            .field("mode", &self.orchestrator.mode)
            .field("trials", &self.trials.len())
            .finish()
    }
}

fn build_backend(config: &ServiceConfig, o: &EngineOverrides) -> Result<Arc<dyn ChatBackend>, EngineError> {
    let kind = o.backend.unwrap_or(config.backend.kind);
    let inner: Arc<dyn ChatBackend> = match kind {
        BackendKind::Scripted => {
            let path = o
                .script
                .as_ref()
                .or(config.backend.script.as_ref())
                .ok_or(EngineError::MissingSetting(kind, "script"))?;
            Arc::new(ScriptedBackend::load(path)?)
        }
        BackendKind::Replay => {
            let path = o
                .cassette
                .as_ref()
                .or(config.backend.cassette.as_ref())
                .ok_or(EngineError::MissingSetting(kind, "cassette"))?;
            Arc::new(CassetteBackend::replay(path)?)
        }
        BackendKind::Live => {
            let provider = config
                .backend
                .provider
                .clone()
                .ok_or(EngineError::MissingSetting(kind, "backend.provider"))?;
            Arc::new(HttpChatBackend::new(provider))
        }
    };
    Ok(match &o.record {
        Some(path) => Arc::new(CassetteBackend::record(path, Box::new(inner))?),
        None => inner,
    })
}

fn build_prices(config: &ServiceConfig) -> Result<PriceTable, EngineError> {
    let mut table = match (&config.model.prices, config.model.price) {
        (Some(path), _) => PriceTable::load(path)?,
        (None, Some(price)) => PriceTable::single(config.model.id.clone(), price),
        (None, None) => PriceTable::default(),
    };
    if table.default.is_none() {
        table.default = Some(NOMINAL_PRICE);
    }
    Ok(table)
}

pub fn build_tokenizer(config: &ServiceConfig) -> Result<Arc<dyn Tokenizer>, EngineError> {
    Ok(match &config.tokenizer {
        TokenizerSection::Bpe { vocab: Some(path) } => Arc::new(BpeTokenizer::load(path)?),
        TokenizerSection::Bpe { vocab: None } => Arc::new(BpeTokenizer::packaged()),
        TokenizerSection::Whitespace => Arc::new(WhitespaceTokenizer),
    })
}

pub fn build_embedder(config: &ServiceConfig) -> Result<Box<dyn Embedder>, EngineError> {
    Ok(match &config.embedding {
        EmbeddingSection::Hash { dimension: 0 } | EmbeddingSection::Http { dimension: 0, .. } => {
            return Err(EngineError::Dimension)
        }
        EmbeddingSection::Hash { dimension } => Box::new(HashEmbedder::new(*dimension)),
        EmbeddingSection::Http {
            endpoint,
            model,
            dimension,
            api_key_env,
        } => Box::new(HttpEmbedder::new(
            endpoint.clone(),
            model.clone(),
            std::env::var(api_key_env).ok(),
            *dimension,
        )),
    })
}

pub fn build_routing(section: Option<&RoutingSection>) -> Result<SpecialtyRouting, EngineError> {
    let Some(r) = section else {
        return Ok(SpecialtyRouting::default());
    };
    // BTreeMap order over `Specialty` is declaration order, which is the routing precedence.
    let map: Vec<(Specialty, Vec<String>)> = r.keywords.iter().map(|(s, k)| (*s, k.clone())).collect();
    Ok(SpecialtyRouting::new(map, r.excluded.clone())?)
}

impl Engine {
    pub fn build(config: &ServiceConfig, overrides: &EngineOverrides) -> Result<Self, EngineError> {
        let backend = build_backend(config, overrides)?;
        Self::with_backend(config, overrides, backend)
    }

    /// As [`Engine::build`] but with a caller-supplied model backend.
    pub fn with_backend(
        config: &ServiceConfig,
        overrides: &EngineOverrides,
        backend: Arc<dyn ChatBackend>,
    ) -> Result<Self, EngineError> {
        let tokenizer = build_tokenizer(config)?;
        let gateway = Gateway::new(backend, build_prices(config)?, tokenizer.clone())
            .with_max_in_flight(config.run.max_in_flight);
        let prompts = match &config.orchestrator.prompts {
            Some(path) => PromptSet::load(path)?,
            None => PromptSet::builtin(),
        };
        let mut orchestrator = OrchestratorConfig::new(config.model.id.clone());
        orchestrator.mode = overrides.mode.unwrap_or(config.orchestrator.mode);
        orchestrator.retrieval = config.retrieval;
        orchestrator.temperature = config.model.temperature;
        orchestrator.max_output_tokens = config.model.max_output_tokens;
        orchestrator.skip_pi_on_unanimity = config.orchestrator.skip_pi_on_unanimity;
        orchestrator.parallel_criteria = config.orchestrator.parallel_criteria;
        orchestrator.prompts = Arc::new(prompts);
        let trials = match &config.protocols {
            Some(dir) => load_protocol_dir(dir)?,
            None => trialmatch_core::fixtures::six_trial_protocols(),
        };
        Ok(Engine {
            gateway,
            embedder: build_embedder(config)?,
            orchestrator,
            tokenizer,
            routing: build_routing(config.routing.as_ref())?,
            chunking: config.chunking,
            trials,
            parallelism: overrides.parallelism.unwrap_or(config.run.parallelism).max(1),
        })
    }

    pub fn run_env<'a>(&'a self, corpus: &'a Corpus, kb: &'a KbSnapshot) -> RunEnv<'a> {
        RunEnv {
            orchestrator: Orchestrator::new(&self.gateway, self.embedder.as_ref(), &self.orchestrator, kb),
            corpus,
            trials: &self.trials,
            routing: &self.routing,
            tokenizer: self.tokenizer.as_ref(),
            chunking: self.chunking,
            parallelism: self.parallelism,
        }
    }

    pub fn config_digest(&self) -> String {
        let kb = KbSnapshot::empty();
        Orchestrator::new(&self.gateway, self.embedder.as_ref(), &self.orchestrator, &kb).config_digest(&self.chunking)
    }

    pub fn trial(&self, id: &str) -> Option<&Trial> {
        self.trials.iter().find(|t| t.id == id)
    }
}
