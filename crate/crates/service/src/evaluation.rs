//! Metrics for a finished run against a label set.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;
use trialmatch_core::eligibility::EligibilityReport;
use trialmatch_core::eval::{
    confusion, disqualifying_histogram, metrics, outcome_predictions, ConfusionMatrix, HistogramBin, LabeledPair,
    MetricsSummary, StatsError,
};
use trialmatch_core::triage::{finalize, ReviewQueue, TriageError};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("confidence must lie strictly between 0 and 1")]
    Confidence,
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Triage(#[from] TriageError),
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmMetrics {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsSummary,
}

impl ArmMetrics {
    fn of(c: ConfusionMatrix, confidence: f64) -> Self {
        ArmMetrics {
            confusion: c,
            metrics: metrics(&c, confidence),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    /// Labeled pairs that the run assessed.
    pub pairs: usize,
    pub ai: ArmMetrics,
    /// AI plus review; present once every queued item has a decision.
    pub workflow: Option<ArmMetrics>,
    pub queued: usize,
    pub reviewed: usize,
    pub histogram: BTreeMap<usize, HistogramBin>,
}

/// Labels outside the run's pairs are ignored; a report without a label is
/// an error.
pub fn evaluate_run(
    reports: &[EligibilityReport],
    queue: Option<&ReviewQueue>,
    labels: &[LabeledPair],
    confidence: f64,
) -> Result<RunMetrics, EvaluationError> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(EvaluationError::Confidence);
    }
    let covered: BTreeSet<(&str, &str)> = reports
        .iter()
        .map(|r| (r.patient_id.as_str(), r.trial_id.as_str()))
        .collect();
    let labels: Vec<LabeledPair> = labels
        .iter()
        .filter(|l| covered.contains(&(l.patient_id.as_str(), l.trial_id.as_str())))
        .cloned()
        .collect();
    let ai = confusion(
        reports
            .iter()
            .map(|r| (r.patient_id.as_str(), r.trial_id.as_str(), r.determination)),
        &labels,
    )?;
    let (workflow, queued, reviewed) = match queue {
        Some(q) if q.unresolved() == 0 => {
            let outcomes = finalize(reports, q)?;
            let c = confusion(outcome_predictions(&outcomes), &labels)?;
            (Some(ArmMetrics::of(c, confidence)), q.len(), q.len())
        }
        Some(q) => (None, q.len(), q.len() - q.unresolved()),
        None => (None, 0, 0),
    };
    Ok(RunMetrics {
        pairs: labels.len(),
        ai: ArmMetrics::of(ai, confidence),
        workflow,
        queued,
        reviewed,
        histogram: disqualifying_histogram(reports, &labels),
    })
}

impl RunMetrics {
    /// Plain-text rendering used by the command line.
    pub fn to_text(&self) -> String {
        let mut out = format!("labeled pairs: {}\n\nAI alone\n", self.pairs);
        out.push_str(&self.ai.metrics.to_table());
        match &self.workflow {
            Some(w) => {
                out.push_str(&format!("\nAI + review ({} reviewed)\n", self.reviewed));
                out.push_str(&w.metrics.to_table());
            }
            None if self.queued > 0 => out.push_str(&format!(
                "\nreview in progress: {}/{} decided\n",
                self.reviewed, self.queued
            )),
            None => {}
        }
        out.push_str("\npredicted not eligible, by disqualifying count\n");
        out.push_str(&format!("{:>6} {:>14} {:>15}\n", "count", "true negative", "false negative"));
        for (count, bin) in &self.histogram {
            out.push_str(&format!("{count:>6} {:>14} {:>15}\n", bin.true_negative, bin.false_negative));
        }
        out
    }
}
