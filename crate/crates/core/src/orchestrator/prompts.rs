use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Specialty;
use crate::protocol::CriterionStatus;

const CRITERION_VARS: &[&str] = &[
    "patient_id",
    "trial_id",
    "criterion_id",
    "criterion_kind",
    "criterion_text",
];

/// A versioned set of prompt templates. Placeholders are `{{name}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSet {
    pub id: String,
    pub coordinator_system: String,
    pub coordinator_user: String,
    pub expert_system: String,
    pub knowledge_base_section: String,
    pub expert_user: String,
    pub pi_system: String,
    pub pi_user: String,
    pub reask_determination: String,
    pub reask_experts: String,
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt set: {0}")]
    Parse(String),
    #[error("template `{template}` uses unknown placeholder `{{{{{name}}}}}`")]
    UnknownPlaceholder { template: &'static str, name: String },
    #[error("template `{template}` has an unterminated placeholder")]
    Unterminated { template: &'static str },
    #[error("reading prompt set: {0}")]
    Io(#[from] std::io::Error),
}

fn placeholders(template: &str) -> Result<Vec<&str>, ()> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(i) = rest.find("{{") {
        let after = &rest[i + 2..];
        let j = after.find("}}").ok_or(())?;
        out.push(&after[..j]);
        rest = &after[j + 2..];
    }
    Ok(out)
}

/// Substitutes `{{name}}` placeholders in one left-to-right pass, so values
/// containing braces are never re-expanded.
pub(crate) fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(i) = rest.find("{{") {
        out.push_str(&rest[..i]);
        let after = &rest[i + 2..];
        let Some(j) = after.find("}}") else {
            out.push_str(&rest[i..]);
            return out;
        };
        let name = &after[..j];
        match vars.iter().find(|(k, _)| *k == name) {
            Some((_, v)) => out.push_str(v),
            None => out.push_str(&rest[i..i + 2 + j + 2]),
        }
        rest = &after[j + 2..];
    }
    out.push_str(rest);
    out
}

impl PromptSet {
    pub fn builtin() -> Self {
        Self::parse(include_str!("../../data/prompts/v1.toml")).expect("packaged prompt set is valid")
    }

    pub fn parse(source: &str) -> Result<Self, PromptError> {
        let set: PromptSet = toml::from_str(source).map_err(|e| PromptError::Parse(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<(), PromptError> {
        let with = |extra: &[&'static str]| -> Vec<&'static str> {
            CRITERION_VARS.iter().copied().chain(extra.iter().copied()).collect()
        };
        let checks: [(&'static str, &str, Vec<&'static str>); 9] = [
            ("coordinator_system", &self.coordinator_system, vec!["experts"]),
            ("coordinator_user", &self.coordinator_user, with(&[])),
            ("expert_system", &self.expert_system, vec!["role", "knowledge_base"]),
            ("knowledge_base_section", &self.knowledge_base_section, vec!["entries"]),
            ("expert_user", &self.expert_user, with(&["evidence", "role"])),
            ("pi_system", &self.pi_system, vec![]),
            ("pi_user", &self.pi_user, with(&["opinions"])),
            ("reask_determination", &self.reask_determination, vec![]),
            ("reask_experts", &self.reask_experts, vec![]),
        ];
        for (template, text, allowed) in checks {
            let names = placeholders(text).map_err(|_| PromptError::Unterminated { template })?;
            if let Some(bad) = names.into_iter().find(|n| !allowed.contains(n)) {
                return Err(PromptError::UnknownPlaceholder {
                    template,
                    name: bad.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Hex sha256 over the canonical serialization of every template.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).unwrap()))
    }
}

/// Splits a reply into its explanation and the status on its final
/// non-empty line, which must read `Determination: <status>` (case-insensitive).
pub fn parse_determination(reply: &str) -> Option<(String, CriterionStatus)> {
    let trimmed = reply.trim_end();
    let (head, last) = match trimmed.rfind('\n') {
        Some(i) => (&trimmed[..i], &trimmed[i + 1..]),
        None => ("", trimmed),
    };
    let line = last.trim().trim_matches('*').trim().to_ascii_lowercase();
    let value = line.strip_prefix("determination:")?.trim().trim_end_matches('.').trim();
    let status = match value {
        "met" => CriterionStatus::Met,
        "not met" => CriterionStatus::NotMet,
        "unable to determine" => CriterionStatus::UnableToDetermine,
        _ => return None,
    };
    Some((head.trim().to_string(), status))
}

/// Reads the last `Experts:` line. `None` when there is no such line or it
/// names no recognizable specialty.
pub fn parse_experts(reply: &str) -> Option<Vec<Specialty>> {
    let line = reply.lines().rev().find_map(|l| {
        let t = l.trim().trim_matches('*').trim();
        let lower = t.to_ascii_lowercase();
        lower
            .starts_with("experts:")
            .then(|| t["experts:".len()..].to_string())
    })?;
    let mut found = Vec::new();
    for item in line.split([',', ';', '/']).flat_map(|s| s.split(" and ")) {
        if let Some(s) = Specialty::from_name(item) {
            if !found.contains(&s) {
                found.push(s);
            }
        }
    }
    (!found.is_empty()).then_some(found)
}
