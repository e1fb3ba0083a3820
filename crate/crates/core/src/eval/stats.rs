use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use super::{Label, LabeledPair};
use crate::eligibility::{Determination, EligibilityReport};
use crate::triage::WorkflowOutcome;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("interval is undefined for n = 0")]
    EmptySample,
    #[error("successes ({k}) exceed trials ({n})")]
    TooManySuccesses { k: u64, n: u64 },
    #[error("confidence must lie strictly between 0 and 1 (got {0})")]
    Confidence(f64),
    #[error("no label for (patient `{0}`, trial `{1}`)")]
    Unlabeled(String, String),
    #[error("{0} labeled pair(s) have no prediction")]
    Uncovered(usize),
}

fn z_two_sided(confidence: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + confidence / 2.0)
}

/// Wilson score interval for `k` successes in `n` trials. The bound at an
/// extreme (`k = 0` or `k = n`) is exact: 0 and 1 respectively.
pub fn wilson_interval(k: u64, n: u64, confidence: f64) -> Result<(f64, f64), StatsError> {
    if n == 0 {
        return Err(StatsError::EmptySample);
    }
    if k > n {
        return Err(StatsError::TooManySuccesses { k, n });
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(StatsError::Confidence(confidence));
    }
    let z = z_two_sided(confidence);
    let (nf, p) = (n as f64, k as f64 / n as f64);
    let z2n = z * z / nf;
    let denom = 1.0 + z2n;
    let center = (p + z2n / 2.0) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2n / (4.0 * nf)).sqrt();
    let lo = if k == 0 { 0.0 } else { (center - half).clamp(0.0, 1.0) };
    let hi = if k == n { 1.0 } else { (center + half).clamp(0.0, 1.0) };
    Ok((lo.min(p), hi.max(p)))
}

/// Two-tailed p-value of the pooled two-sample z-test for proportions.
pub fn two_proportion_test(k1: u64, n1: u64, k2: u64, n2: u64) -> Result<f64, StatsError> {
    if n1 == 0 || n2 == 0 {
        return Err(StatsError::EmptySample);
    }
    if k1 > n1 || k2 > n2 {
        return Err(StatsError::TooManySuccesses {
            k: k1.max(k2),
            n: if k1 > n1 { n1 } else { n2 },
        });
    }
    let (p1, p2) = (k1 as f64 / n1 as f64, k2 as f64 / n2 as f64);
    let pooled = (k1 + k2) as f64 / (n1 + n2) as f64;
    if pooled == 0.0 || pooled == 1.0 {
        // Both proportions are then equal (all 0 or all 1).
        return Ok(1.0);
    }
    if k1 * n2 == k2 * n1 {
        return Ok(1.0);
    }
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    let z = (p1 - p2) / se;
    Ok(libm::erfc(z.abs() / std::f64::consts::SQRT_2))
}

/// Positive class is `Eligible`; a `PotentiallyEligible` prediction is positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn add(&mut self, label: Label, predicted: Determination) {
        match (label, predicted) {
            (Label::Eligible, Determination::PotentiallyEligible) => self.tp += 1,
            (Label::Eligible, Determination::NotEligible) => self.fn_ += 1,
            (Label::NotEligible, Determination::PotentiallyEligible) => self.fp += 1,
            (Label::NotEligible, Determination::NotEligible) => self.tn += 1,
        }
    }
}

/// Tallies predictions against labels. Both sides must cover the same pairs.
pub fn confusion<'a, I>(predictions: I, labels: &[LabeledPair]) -> Result<ConfusionMatrix, StatsError>
where
    I: IntoIterator<Item = (&'a str, &'a str, Determination)>,
{
    let by_pair: HashMap<(&str, &str), Label> = labels
        .iter()
        .map(|l| ((l.patient_id.as_str(), l.trial_id.as_str()), l.label))
        .collect();
    let mut m = ConfusionMatrix::default();
    let mut seen = 0usize;
    for (patient, trial, predicted) in predictions {
        let label = by_pair
            .get(&(patient, trial))
            .ok_or_else(|| StatsError::Unlabeled(patient.to_string(), trial.to_string()))?;
        m.add(*label, predicted);
        seen += 1;
    }
    if seen != by_pair.len() {
        return Err(StatsError::Uncovered(by_pair.len().saturating_sub(seen)));
    }
    Ok(m)
}

pub fn outcome_predictions(outcomes: &[WorkflowOutcome]) -> impl Iterator<Item = (&str, &str, Determination)> {
    outcomes
        .iter()
        .map(|o| (o.patient_id.as_str(), o.trial_id.as_str(), o.final_determination))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub successes: u64,
    pub n: u64,
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Estimate {
    fn of(k: u64, n: u64, confidence: f64) -> Option<Estimate> {
        let (lo, hi) = wilson_interval(k, n, confidence).ok()?;
        Some(Estimate {
            successes: k,
            n,
            point: k as f64 / n as f64,
            lo,
            hi,
        })
    }
}

/// A metric is `None` when its denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub confidence: f64,
    pub accuracy: Option<Estimate>,
    pub sensitivity: Option<Estimate>,
    pub specificity: Option<Estimate>,
    pub ppv: Option<Estimate>,
    pub npv: Option<Estimate>,
}

pub fn metrics(m: &ConfusionMatrix, confidence: f64) -> MetricsSummary {
    MetricsSummary {
        confidence,
        accuracy: Estimate::of(m.tp + m.tn, m.total(), confidence),
        sensitivity: Estimate::of(m.tp, m.tp + m.fn_, confidence),
        specificity: Estimate::of(m.tn, m.tn + m.fp, confidence),
        ppv: Estimate::of(m.tp, m.tp + m.fp, confidence),
        npv: Estimate::of(m.tn, m.tn + m.fn_, confidence),
    }
}

impl MetricsSummary {
    /// Plain-text table, one metric per row.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>9} {:>10}  {}\n",
            "metric",
            "k/n",
            "estimate",
            format_args!("{}% Wilson CI", self.confidence * 100.0)
        );
        let rows = [
            ("accuracy", self.accuracy),
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("ppv", self.ppv),
            ("npv", self.npv),
        ];
        for (name, e) in rows {
            match e {
                Some(e) => out.push_str(&format!(
                    "{:<12} {:>9} {:>9.1}%  [{:.1}%, {:.1}%]\n",
                    name,
                    format!("{}/{}", e.successes, e.n),
                    e.point * 100.0,
                    e.lo * 100.0,
                    e.hi * 100.0
                )),
                None => out.push_str(&format!("{name:<12} {:>9} {:>10}\n", "0/0", "n/a")),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub true_negative: u64,
    pub false_negative: u64,
}

/// Predicted negatives binned by disqualifying count and split by truth.
/// Unlabeled reports are skipped.
pub fn disqualifying_histogram(
    reports: &[EligibilityReport],
    labels: &[LabeledPair],
) -> BTreeMap<usize, HistogramBin> {
    let by_pair: HashMap<(&str, &str), Label> = labels
        .iter()
        .map(|l| ((l.patient_id.as_str(), l.trial_id.as_str()), l.label))
        .collect();
    let mut h: BTreeMap<usize, HistogramBin> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.determination == Determination::NotEligible) {
        let Some(label) = by_pair.get(&(r.patient_id.as_str(), r.trial_id.as_str())) else {
            continue;
        };
        let bin = h.entry(r.disqualifying_count).or_default();
        match label {
            Label::NotEligible => bin.true_negative += 1,
            Label::Eligible => bin.false_negative += 1,
        }
    }
    h
}
