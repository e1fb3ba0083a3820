//! The persisted per-(patient, trial) report document.
//!
//! Serialization is canonical: pretty JSON with struct fields in declaration
//! order and a trailing newline. The same inputs always produce the same bytes.

use serde::{Deserialize, Serialize};

use crate::eligibility::EligibilityReport;
use crate::gateway::{CostLedger, LedgerEntry};

pub const REPORT_FORMAT: &str = "trialmatch-report";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerExcerpt {
    pub calls: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_cost: f64,
    pub entries: Vec<LedgerEntry>,
}

impl From<&CostLedger> for LedgerExcerpt {
    fn from(l: &CostLedger) -> Self {
        LedgerExcerpt {
            calls: l.len(),
            prompt_tokens: l.prompt_tokens(),
            completion_tokens: l.completion_tokens(),
            total_cost: l.total(),
            entries: l.entries().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub format: String,
    pub version: u32,
    pub nct_id: String,
    pub config_digest: String,
    pub kb_version: u64,
    pub kb_digest: String,
    #[serde(flatten)]
    pub report: EligibilityReport,
    pub ledger: LedgerExcerpt,
}

impl ReportDocument {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    /// File-system friendly key, e.g. `16-323__SYN-0001`.
    pub fn key(&self) -> String {
        pair_key(&self.report.trial_id, &self.report.patient_id)
    }
}

pub fn pair_key(trial_id: &str, patient_id: &str) -> String {
    let clean = |s: &str| {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect::<String>()
    };
    format!("{}__{}", clean(trial_id), clean(patient_id))
}
