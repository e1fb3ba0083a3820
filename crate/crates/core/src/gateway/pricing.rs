use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Usage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub input_per_token: f64,
    pub output_per_token: f64,
}

impl ModelPrice {
    pub fn new(input_per_token: f64, output_per_token: f64) -> Self {
        ModelPrice {
            input_per_token,
            output_per_token,
        }
    }

    pub fn cost(&self, usage: Usage) -> f64 {
        usage.prompt_tokens as f64 * self.input_per_token
            + usage.completion_tokens as f64 * self.output_per_token
    }
}

#[derive(Debug, Error)]
pub enum PricingError {
    #[error("no price configured for model `{0}`")]
    Unpriced(String),
    #[error("negative or non-finite price for `{0}`")]
    Invalid(String),
    #[error("price table: {0}")]
    Parse(String),
    #[error("reading price table: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-model token prices, e.g.
///
/// ```toml
/// [models."gpt-4o"]
/// input_per_token = 2.5e-6
/// output_per_token = 1.0e-5
///
/// [default]
/// input_per_token = 0.0
/// output_per_token = 0.0
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceTable {
    #[serde(default)]
    pub models: BTreeMap<String, ModelPrice>,
    #[serde(default)]
    pub default: Option<ModelPrice>,
}

impl PriceTable {
    pub fn single(model: impl Into<String>, price: ModelPrice) -> Self {
        let mut models = BTreeMap::new();
        models.insert(model.into(), price);
        PriceTable {
            models,
            default: None,
        }
    }

    pub fn parse(source: &str) -> Result<Self, PricingError> {
        let table: PriceTable =
            toml::from_str(source).map_err(|e| PricingError::Parse(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, PricingError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), PricingError> {
        let ok = |p: &ModelPrice| {
            p.input_per_token.is_finite()
                && p.output_per_token.is_finite()
                && p.input_per_token >= 0.0
                && p.output_per_token >= 0.0
        };
        for (name, p) in &self.models {
            if !ok(p) {
                return Err(PricingError::Invalid(name.clone()));
            }
        }
        if let Some(p) = &self.default {
            if !ok(p) {
                return Err(PricingError::Invalid("default".into()));
            }
        }
        Ok(())
    }

    pub fn price(&self, model: &str) -> Result<ModelPrice, PricingError> {
        self.models
            .get(model)
            .copied()
            .or(self.default)
            .ok_or_else(|| PricingError::Unpriced(model.to_string()))
    }
}
