//! Retrieval-grounded, multi-agent clinical trial eligibility prescreening.

pub mod assessment;
pub mod corpus;
pub mod eligibility;
pub mod eval;
pub mod fixtures;
pub mod gateway;
pub mod index;
pub mod kb;
pub mod orchestrator;
pub mod protocol;
pub mod tokenize;
pub mod pipeline;
pub mod report;
pub mod triage;
