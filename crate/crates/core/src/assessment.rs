//! Per-criterion assessment records shared by the orchestrator, the rule
//! engine and the triage workflow.

use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::corpus::{DocId, Specialty};
use crate::gateway::AgentRole;
use crate::index::SearchHit;
use crate::protocol::{CriterionFlag, CriterionId, CriterionKind, CriterionStatus};

/// A place on the expert panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Seat {
    Specialist(Specialty),
    /// Single-expert configuration: one agent over all documents.
    Generalist,
}

impl Seat {
    pub fn role_name(self) -> &'static str {
        match self {
            Seat::Specialist(s) => s.role_name(),
            Seat::Generalist => "clinical trial screening expert",
        }
    }

    pub fn agent_role(self) -> AgentRole {
        match self {
            Seat::Specialist(s) => AgentRole::Expert(s),
            Seat::Generalist => AgentRole::Generalist,
        }
    }
}

impl fmt::Display for Seat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Seat::Specialist(s) => write!(f, "{s}"),
            Seat::Generalist => f.write_str("generalist"),
        }
    }
}

/// Provenance of one snippet placed in an expert prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRef {
    pub doc_id: DocId,
    pub chunk_index: usize,
    pub note_type: String,
    pub created_date: NaiveDate,
    pub token_span: (usize, usize),
    pub similarity: f64,
    /// Verbatim chunk text.
    pub text: String,
}

impl From<&SearchHit<'_>> for EvidenceRef {
    fn from(hit: &SearchHit<'_>) -> Self {
        let c = &hit.chunk.chunk;
        EvidenceRef {
            doc_id: c.doc_id.clone(),
            chunk_index: c.chunk_index,
            note_type: c.note_type.clone(),
            created_date: c.created_date,
            token_span: c.token_span,
            similarity: hit.similarity,
            text: c.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertOpinion {
    pub seat: Seat,
    pub explanation: String,
    pub status: CriterionStatus,
    pub evidence: Vec<EvidenceRef>,
}

/// How the final status of a criterion was reached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Adjudication {
    /// Flagged criterion; no model was consulted.
    Predetermined { flag: CriterionFlag },
    /// Every opinion agreed and the adjudicator was not called.
    Unanimous,
    PrincipalInvestigator { narrative: String },
    /// Adjudicator output was unusable; majority vote, ties to unable-to-determine.
    MajorityFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionAssessment {
    pub criterion_id: CriterionId,
    pub kind: CriterionKind,
    pub final_status: CriterionStatus,
    pub opinions: Vec<ExpertOpinion>,
    pub adjudication: Adjudication,
    pub routed: Vec<Seat>,
    /// True when the coordinator's answer was unusable and every seat was consulted.
    #[serde(default)]
    pub routing_fallback: bool,
    pub short_circuited: bool,
}

impl CriterionAssessment {
    pub fn predetermined(
        criterion_id: impl Into<CriterionId>,
        kind: CriterionKind,
        flag: CriterionFlag,
        status: CriterionStatus,
    ) -> Self {
        CriterionAssessment {
            criterion_id: criterion_id.into(),
            kind,
            final_status: status,
            opinions: Vec::new(),
            adjudication: Adjudication::Predetermined { flag },
            routed: Vec::new(),
            routing_fallback: false,
            short_circuited: true,
        }
    }
}
