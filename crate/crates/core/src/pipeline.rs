//! Batch assessment of (patient, trial) pairs.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{filter_by_cutoff, Corpus, PatientId, SpecialtyRouting};
use crate::eligibility::determine;
use crate::gateway::CostLedger;
use crate::index::{build_patient_stores, ChunkingConfig, PatientStores};
use crate::orchestrator::Orchestrator;
use crate::protocol::{Trial, TrialId};
use crate::report::{LedgerExcerpt, ReportDocument, REPORT_FORMAT};
use crate::tokenize::Tokenizer;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairRequest {
    pub patient_id: PatientId,
    pub trial_id: TrialId,
    /// Only documents created strictly before this date are used.
    #[serde(default)]
    pub cutoff: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairFailure {
    pub patient_id: PatientId,
    pub trial_id: TrialId,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    /// Sorted by (trial id, patient id).
    pub reports: Vec<ReportDocument>,
    pub failures: Vec<PairFailure>,
    /// Every call of the run, in report order.
    pub ledger: CostLedger,
}

pub struct RunEnv<'a> {
    pub orchestrator: Orchestrator<'a>,
    pub corpus: &'a Corpus,
    pub trials: &'a [Trial],
    pub routing: &'a SpecialtyRouting,
    pub tokenizer: &'a dyn Tokenizer,
    pub chunking: ChunkingConfig,
    /// Pairs assessed concurrently; 1 runs them in order.
    pub parallelism: usize,
}

impl RunEnv<'_> {
    fn stores(&self, patient_id: &str, cutoff: Option<NaiveDate>) -> Result<PatientStores, String> {
        let selected: Vec<_> = match cutoff {
            Some(date) => filter_by_cutoff(self.corpus, patient_id, date).map_err(|e| e.to_string())?,
            None => self
                .corpus
                .documents(patient_id)
                .ok_or_else(|| format!("unknown patient `{patient_id}`"))?
                .iter()
                .collect(),
        };
        build_patient_stores(
            patient_id,
            selected,
            self.routing,
            self.tokenizer,
            &self.chunking,
            self.orchestrator.embedder,
        )
        .map(|(s, _)| s)
        .map_err(|e| e.to_string())
    }

    fn one(&self, pair: &PairRequest) -> Result<ReportDocument, String> {
        let trial = self
            .trials
            .iter()
            .find(|t| t.id == pair.trial_id)
            .ok_or_else(|| format!("unknown trial `{}`", pair.trial_id))?;
        let stores = self.stores(&pair.patient_id, pair.cutoff)?;
        let out = self
            .orchestrator
            .assess_trial(&stores, trial)
            .map_err(|e| e.to_string())?;
        let report = determine(&pair.patient_id, &trial.id, out.assessments, &trial.criteria)
            .map_err(|e| e.to_string())?;
        let kb = self.orchestrator.kb;
        Ok(ReportDocument {
            format: REPORT_FORMAT.into(),
            version: 1,
            nct_id: trial.nct_id.clone(),
            config_digest: self.config_digest(),
            kb_version: kb.version(),
            kb_digest: kb.digest(),
            report,
            ledger: LedgerExcerpt::from(&out.ledger),
        })
    }

    pub fn config_digest(&self) -> String {
        self.orchestrator.config_digest(&self.chunking)
    }

    /// Assesses every pair. A failing pair is recorded and does not stop the run.
    pub fn run(&self, pairs: &[PairRequest]) -> RunOutput {
        let mut sorted: Vec<&PairRequest> = pairs.iter().collect();
        sorted.sort_by(|a, b| (&a.trial_id, &a.patient_id).cmp(&(&b.trial_id, &b.patient_id)));
        sorted.dedup_by(|a, b| a.trial_id == b.trial_id && a.patient_id == b.patient_id);
        let results: Vec<_> = if self.parallelism > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.parallelism)
                .build()
                .expect("thread pool");
            pool.install(|| sorted.par_iter().map(|p| (*p, self.one(p))).collect())
        } else {
            sorted.iter().map(|p| (*p, self.one(p))).collect()
        };
        let mut out = RunOutput::default();
        for (pair, r) in results {
            match r {
                Ok(doc) => {
                    for e in &doc.ledger.entries {
                        out.ledger.push(e.clone());
                    }
                    out.reports.push(doc);
                }
                Err(error) => out.failures.push(PairFailure {
                    patient_id: pair.patient_id.clone(),
                    trial_id: pair.trial_id.clone(),
                    error,
                }),
            }
        }
        out
    }
}

/// Reports keyed by (trial id, patient id).
pub fn index_reports(reports: &[ReportDocument]) -> BTreeMap<(TrialId, PatientId), &ReportDocument> {
    reports
        .iter()
        .map(|r| ((r.report.trial_id.clone(), r.report.patient_id.clone()), r))
        .collect()
}
