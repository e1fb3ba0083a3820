//! Provider-agnostic chat completion with usage metering.
//!
//! Every completion goes through [`Gateway::complete`], which retries
//! transport-class failures, fills in usage from the configured tokenizer when
//! a backend does not report it, and appends a priced entry to a [`CostLedger`].

mod cassette;
mod live;
mod pricing;
mod scripted;

pub use cassette::{CassetteBackend, CassetteEntry, CassetteError};
pub use live::{HttpChatBackend, ProviderConfig, ProviderSchema};
pub use pricing::{ModelPrice, PriceTable, PricingError};
pub use scripted::{ScriptError, ScriptFile, ScriptRule, ScriptedBackend};

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Specialty;
use crate::tokenize::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    #[serde(default)]
    pub temperature: f64,
    pub model_id: String,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn new(
        model_id: impl Into<String>,
        system_prompt: impl Into<String>,
        user_prompt: impl Into<String>,
    ) -> Self {
        ChatRequest {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: 0.0,
            model_id: model_id.into(),
            max_output_tokens: 1024,
        }
    }

    /// Stable key over (system prompt, user prompt, model, temperature).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            self.system_prompt.as_bytes(),
            self.user_prompt.as_bytes(),
            self.model_id.as_bytes(),
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        h.update(self.temperature.to_bits().to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// What a backend returns; `usage` is absent when the backend has no native count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub backend_id: String,
    pub latency: Duration,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unusable provider response: {0}")]
    Content(String),
    #[error("no cassette entry for request {digest}")]
    CassetteMiss { digest: String },
    #[error("no script rule matches the request")]
    NoScriptMatch,
}

impl BackendError {
    /// Transport failures, 5xx and 429 are retried; content errors never are.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Http { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "role", content = "specialty")]
pub enum AgentRole {
    Coordinator,
    Expert(Specialty),
    /// The single expert that reads every document.
    Generalist,
    PrincipalInvestigator,
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentRole::Coordinator => f.write_str("coordinator"),
            AgentRole::Expert(s) => write!(f, "expert:{s}"),
            AgentRole::Generalist => f.write_str("generalist"),
            AgentRole::PrincipalInvestigator => f.write_str("principal-investigator"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub role: AgentRole,
    /// Free-form context, e.g. `"16-323/inclusion criterion 3"`.
    pub context: String,
    pub model_id: String,
    pub usage: Usage,
    pub price: ModelPrice,
    pub cost: f64,
}

/// Run-scoped accumulator of priced completions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    entries: Vec<LedgerEntry>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    pub fn extend(&mut self, other: CostLedger) {
        self.entries.extend(other.entries);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prompt_tokens(&self) -> u64 {
        self.entries.iter().map(|e| e.usage.prompt_tokens).sum()
    }

    pub fn completion_tokens(&self) -> u64 {
        self.entries.iter().map(|e| e.usage.completion_tokens).sum()
    }

    /// Σ prompt·p_in + completion·p_out. Token counts are summed exactly per
    /// (model, price) group first, so the result does not depend on entry order.
    pub fn total(&self) -> f64 {
        let mut groups: BTreeMap<(&str, u64, u64), (u64, u64, ModelPrice)> = BTreeMap::new();
        for e in &self.entries {
            let key = (
                e.model_id.as_str(),
                e.price.input_per_token.to_bits(),
                e.price.output_per_token.to_bits(),
            );
            let g = groups.entry(key).or_insert((0, 0, e.price));
            g.0 += e.usage.prompt_tokens;
            g.1 += e.usage.completion_tokens;
        }
        groups
            .values()
            .map(|(p, c, price)| price.cost(Usage {
                prompt_tokens: *p,
                completion_tokens: *c,
            }))
            .sum()
    }
}

pub fn ledger_total(ledger: &CostLedger) -> f64 {
    ledger.total()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("completion failed after {attempts} attempt(s): {source}")]
    Backend {
        attempts: u32,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Pricing(#[from] PricingError),
}

/// Counting semaphore bounding concurrent in-flight requests.
#[derive(Debug)]
struct Limiter {
    available: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            available: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    prices: PriceTable,
    tokenizer: Arc<dyn Tokenizer>,
    retry: RetryPolicy,
    limiter: Limiter,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("tokenizer", &self.tokenizer.id())
            .field("retry", &self.retry)
            .finish()
    }
}

impl Gateway {
    pub fn new(
        backend: Arc<dyn ChatBackend>,
        prices: PriceTable,
        tokenizer: Arc<dyn Tokenizer>,
    ) -> Self {
        Gateway {
            backend,
            prices,
            tokenizer,
            retry: RetryPolicy::default(),
            limiter: Limiter::new(8),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.limiter = Limiter::new(n);
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn prices(&self) -> &PriceTable {
        &self.prices
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    /// Sends `request`, retrying retryable failures with exponential backoff,
    /// and records the priced usage in `ledger`.
    pub fn complete(
        &self,
        role: AgentRole,
        context: &str,
        request: &ChatRequest,
        ledger: &mut CostLedger,
    ) -> Result<ChatResponse, GatewayError> {
        let price = self.prices.price(&request.model_id)?;
        let started = Instant::now();
        let mut attempt = 0;
        let completion = loop {
            attempt += 1;
            let result = {
                let _slot = self.limiter.acquire();
                self.backend.complete(request)
            };
            match result {
                Ok(c) => break c,
                Err(e) if e.is_retryable() && attempt < self.retry.attempts => {
                    std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
                }
                Err(source) => {
                    return Err(GatewayError::Backend {
                        attempts: attempt,
                        source,
                    })
                }
            }
        };
        let usage = completion.usage.unwrap_or_else(|| Usage {
            prompt_tokens: (self.tokenizer.count(&request.system_prompt)
                + self.tokenizer.count(&request.user_prompt)) as u64,
            completion_tokens: self.tokenizer.count(&completion.text) as u64,
        });
        ledger.push(LedgerEntry {
            role,
            context: context.to_string(),
            model_id: request.model_id.clone(),
            usage,
            price,
            cost: price.cost(usage),
        });
        Ok(ChatResponse {
            text: completion.text,
            usage,
            backend_id: self.backend.id().to_string(),
            latency: started.elapsed(),
        })
    }
}
