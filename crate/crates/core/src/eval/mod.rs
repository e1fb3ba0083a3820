//! Evaluation datasets, metrics and the synthetic cohort.
//!
//! The positive class is `Eligible` everywhere: sensitivity is the rate at
//! which eligible patients are kept, specificity the rate at which
//! ineligible ones are screened out.

mod stats;
mod synth;

pub use stats::{
    confusion, disqualifying_histogram, metrics, outcome_predictions, two_proportion_test, wilson_interval,
    ConfusionMatrix, Estimate, HistogramBin, MetricsSummary, StatsError,
};
pub use synth::{
    generate_synthetic_cohort, simulate_perfect_review, CohortSpec, ErrorRates, InjectedError,
    ReviewSummary, SyntheticCohort, TrialCohortSpec,
};

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PatientId;
use crate::protocol::{MetastaticGroup, Trial, TrialId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Eligible,
    NotEligible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    Original,
    CrossTrial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub patient_id: PatientId,
    pub trial_id: TrialId,
    pub label: Label,
    pub label_source: LabelSource,
    pub determination_date: NaiveDate,
}

impl LabeledPair {
    fn stratum(&self) -> (TrialId, Label) {
        (self.trial_id.clone(), self.label)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("split fraction must lie strictly between 0 and 1 (got {0})")]
    Fraction(f64),
    #[error("(patient `{patient_id}`, trial `{trial_id}`) is labeled more than once")]
    DuplicatePair { patient_id: PatientId, trial_id: TrialId },
    #[error("not enough pairs to sample: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Insufficient(Vec<Deficit>),
    #[error("the two arms share no (trial, label) stratum")]
    NoCommonStrata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deficit {
    pub trial_id: TrialId,
    pub label: Label,
    pub needed: usize,
    pub available: usize,
}

impl std::fmt::Display for Deficit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:?}: need {}, have {}",
            self.trial_id, self.label, self.needed, self.available
        )
    }
}

fn check_unique(pairs: &[LabeledPair]) -> Result<(), DatasetError> {
    let mut seen = BTreeSet::new();
    for p in pairs {
        if !seen.insert((&p.patient_id, &p.trial_id)) {
            return Err(DatasetError::DuplicatePair {
                patient_id: p.patient_id.clone(),
                trial_id: p.trial_id.clone(),
            });
        }
    }
    Ok(())
}

/// Adds a `CrossTrial` negative for every eligible pair on a trial of one
/// metastatic group against every trial of the opposite group. Combinations
/// that already carry a label are left alone. Trials with no group add nothing.
pub fn augment_cross_trial(
    pairs: &[LabeledPair],
    trials: &[Trial],
) -> Result<Vec<LabeledPair>, DatasetError> {
    check_unique(pairs)?;
    let group: BTreeMap<&str, MetastaticGroup> =
        trials.iter().map(|t| (t.id.as_str(), t.metastatic_group)).collect();
    let mut labeled: BTreeSet<(PatientId, TrialId)> = pairs
        .iter()
        .map(|p| (p.patient_id.clone(), p.trial_id.clone()))
        .collect();
    let mut out = pairs.to_vec();
    for p in pairs.iter().filter(|p| p.label == Label::Eligible) {
        let Some(opposite) = group.get(p.trial_id.as_str()).and_then(|g| g.opposite()) else {
            continue;
        };
        for t in trials.iter().filter(|t| t.metastatic_group == opposite) {
            if labeled.insert((p.patient_id.clone(), t.id.clone())) {
                out.push(LabeledPair {
                    patient_id: p.patient_id.clone(),
                    trial_id: t.id.clone(),
                    label: Label::NotEligible,
                    label_source: LabelSource::CrossTrial,
                    determination_date: p.determination_date,
                });
            }
        }
    }
    Ok(out)
}

fn strata(pairs: &[LabeledPair]) -> BTreeMap<(TrialId, Label), Vec<&LabeledPair>> {
    let mut s: BTreeMap<_, Vec<&LabeledPair>> = BTreeMap::new();
    for p in pairs {
        s.entry(p.stratum()).or_default().push(p);
    }
    for v in s.values_mut() {
        v.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    }
    s
}

/// Number of a stratum of size `n` that goes to the test side.
fn test_share(n: usize, train_fraction: f64) -> usize {
    (n as f64 * (1.0 - train_fraction) + 1e-9).floor() as usize
}

/// Splits within every (trial, label) stratum: `floor(n·(1−fraction))` pairs
/// go to test and the rest to train, so an odd remainder (and any stratum of
/// one) lands in train.
pub fn stratified_split(
    pairs: &[LabeledPair],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledPair>, Vec<LabeledPair>), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::Fraction(train_fraction));
    }
    check_unique(pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut members) in strata(pairs) {
        members.shuffle(&mut rng);
        let k = test_share(members.len(), train_fraction);
        test.extend(members[..k].iter().map(|p| (*p).clone()));
        train.extend(members[k..].iter().map(|p| (*p).clone()));
    }
    Ok((train, test))
}

/// Draws `positives` eligible and `negatives` not-eligible pairs per trial.
/// Original negatives are used first; cross-trial negatives only fill the gap.
pub fn stratified_eval_sample(
    test: &[LabeledPair],
    positives: usize,
    negatives: usize,
    seed: u64,
) -> Result<Vec<LabeledPair>, DatasetError> {
    check_unique(test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_trial: BTreeMap<&str, [Vec<&LabeledPair>; 3]> = BTreeMap::new();
    for p in test {
        let slot = match (p.label, p.label_source) {
            (Label::Eligible, _) => 0,
            (Label::NotEligible, LabelSource::Original) => 1,
            (Label::NotEligible, LabelSource::CrossTrial) => 2,
        };
        by_trial.entry(&p.trial_id).or_default()[slot].push(p);
    }
    let mut deficits = Vec::new();
    let mut sample = Vec::new();
    for (trial, mut groups) in by_trial {
        for g in groups.iter_mut() {
            g.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
            g.shuffle(&mut rng);
        }
        let [pos, orig, cross] = groups;
        if pos.len() < positives {
            deficits.push(Deficit {
                trial_id: trial.to_string(),
                label: Label::Eligible,
                needed: positives,
                available: pos.len(),
            });
        }
        if orig.len() + cross.len() < negatives {
            deficits.push(Deficit {
                trial_id: trial.to_string(),
                label: Label::NotEligible,
                needed: negatives,
                available: orig.len() + cross.len(),
            });
        }
        let from_orig = orig.len().min(negatives);
        sample.extend(pos.iter().take(positives).map(|p| (*p).clone()));
        sample.extend(orig.iter().take(from_orig).map(|p| (*p).clone()));
        sample.extend(cross.iter().take(negatives - from_orig).map(|p| (*p).clone()));
    }
    if !deficits.is_empty() {
        return Err(DatasetError::Insufficient(deficits));
    }
    Ok(sample)
}

/// Downsamples both arms, per (trial, label) stratum, to the smaller of the
/// two stratum sizes. The subsets therefore have equal size and equal label
/// prevalence. Strata present in only one arm are dropped.
pub fn matched_subset(
    arm_a: &[LabeledPair],
    arm_b: &[LabeledPair],
    seed: u64,
) -> Result<(Vec<LabeledPair>, Vec<LabeledPair>), DatasetError> {
    check_unique(arm_a)?;
    check_unique(arm_b)?;
    let (sa, sb) = (strata(arm_a), strata(arm_b));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut out_a, mut out_b) = (Vec::new(), Vec::new());
    for (key, mut a) in sa {
        let Some(b) = sb.get(&key) else { continue };
        let mut b = b.clone();
        let m = a.len().min(b.len());
        if a.len() > m {
            a.shuffle(&mut rng);
        }
        if b.len() > m {
            b.shuffle(&mut rng);
        }
        out_a.extend(a.into_iter().take(m).cloned());
        out_b.extend(b.into_iter().take(m).cloned());
    }
    if out_a.is_empty() {
        return Err(DatasetError::NoCommonStrata);
    }
    let order = |x: &LabeledPair, y: &LabeledPair| (&x.trial_id, &x.patient_id).cmp(&(&y.trial_id, &y.patient_id));
    out_a.sort_by(order);
    out_b.sort_by(order);
    Ok((out_a, out_b))
}

#[cfg(test)]
mod tests;
