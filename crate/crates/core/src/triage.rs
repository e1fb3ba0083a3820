//! Human review of near-miss negatives.
//!
//! Predicted negatives with `1..=threshold` disqualifying criteria are queued
//! for a coordinator, lowest count first. Reviewers confirm or override
//! individual criterion statuses; the patient-level determination is always
//! recomputed by the rule engine, never set directly.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PatientId;
use crate::eligibility::{determine, Determination, EligibilityError, EligibilityReport};
use crate::kb::{EntryScope, ErrorMode, KbError, KnowledgeBase, NewEntry};
use crate::protocol::{CriterionId, CriterionStatus, Trial, TrialId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriagePolicy {
    pub threshold: usize,
}

impl Default for TriagePolicy {
    fn default() -> Self {
        TriagePolicy { threshold: 2 }
    }
}

impl TriagePolicy {
    pub fn new(threshold: usize) -> Result<Self, TriageError> {
        if threshold == 0 {
            return Err(TriageError::InvalidThreshold);
        }
        Ok(TriagePolicy { threshold })
    }

    pub fn selects(&self, report: &EligibilityReport) -> bool {
        report.determination == Determination::NotEligible
            && (1..=self.threshold).contains(&report.disqualifying_count)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairKey {
    pub trial_id: TrialId,
    pub patient_id: PatientId,
}

impl PairKey {
    pub fn new(trial_id: impl Into<TrialId>, patient_id: impl Into<PatientId>) -> Self {
        PairKey {
            trial_id: trial_id.into(),
            patient_id: patient_id.into(),
        }
    }

    pub fn of(report: &EligibilityReport) -> Self {
        PairKey::new(report.trial_id.clone(), report.patient_id.clone())
    }
}

/// Queue order: ascending disqualifying count, then (trial id, patient id).
pub fn select_for_review<'a>(
    reports: &'a [EligibilityReport],
    policy: &TriagePolicy,
) -> Vec<&'a EligibilityReport> {
    let mut q: Vec<_> = reports.iter().filter(|r| policy.selects(r)).collect();
    q.sort_by(|a, b| {
        (a.disqualifying_count, &a.trial_id, &a.patient_id).cmp(&(
            b.disqualifying_count,
            &b.trial_id,
            &b.patient_id,
        ))
    });
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItemState {
    Pending,
    Confirmed,
    Overridden,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverrideRequest {
    pub criterion_id: CriterionId,
    pub status: CriterionStatus,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub error_mode: Option<ErrorMode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedOverride {
    pub criterion_id: CriterionId,
    pub previous: CriterionStatus,
    pub status: CriterionStatus,
    #[serde(default)]
    pub note: Option<String>,
    /// Knowledge entry written for the note, if any.
    #[serde(default)]
    pub kb_entry_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageItem {
    pub patient_id: PatientId,
    pub trial_id: TrialId,
    /// AI-produced report as queued.
    pub original: EligibilityReport,
    /// Current report; differs from `original` only after an override.
    pub report: EligibilityReport,
    pub disqualifying_count: usize,
    pub state: ItemState,
    pub overrides: Vec<AppliedOverride>,
    pub claimed_by: Option<String>,
    pub opened_at: Option<DateTime<Utc>>,
    pub decided_at: Option<DateTime<Utc>>,
    pub review_duration_ms: Option<i64>,
    pub reviewer: Option<String>,
    /// Bumped on every accepted mutation; writers must present the current value.
    pub version: u64,
}

impl TriageItem {
    pub fn key(&self) -> PairKey {
        PairKey::new(self.trial_id.clone(), self.patient_id.clone())
    }
}

#[derive(Debug, Error)]
pub enum TriageError {
    #[error("triage threshold must be at least 1")]
    InvalidThreshold,
    #[error("no queued item for trial `{}` patient `{}`", .0.trial_id, .0.patient_id)]
    UnknownItem(PairKey),
    #[error("unknown trial `{0}`")]
    UnknownTrial(TrialId),
    #[error("criterion `{0}` is not part of this report")]
    UnknownCriterion(CriterionId),
    #[error("an override must change at least one criterion")]
    EmptyOverride,
    #[error("stale write: item is at version {current}, request was based on {presented}")]
    VersionConflict { current: u64, presented: u64 },
    #[error("item is claimed by `{0}`")]
    ClaimedByOther(String),
    #[error("item must be claimed before a decision is recorded")]
    NotClaimed,
    #[error("item is already {0:?}")]
    NotPending(ItemState),
    #[error("{0} queued item(s) have no decision")]
    Incomplete(usize),
    #[error(transparent)]
    Eligibility(#[from] EligibilityError),
    #[error(transparent)]
    Kb(#[from] KbError),
}

impl TriageError {
    /// Errors caused by a concurrent writer rather than a bad request.
    pub fn is_conflict(&self) -> bool {
        matches!(
            self,
            TriageError::VersionConflict { .. } | TriageError::ClaimedByOther(_) | TriageError::NotPending(_)
        )
    }
}

/// Replaces statuses in `report` and re-derives its determination.
/// Validates every override before changing anything.
pub fn apply_override(
    report: &EligibilityReport,
    trial: &Trial,
    overrides: &[OverrideRequest],
) -> Result<(EligibilityReport, Vec<(CriterionId, CriterionStatus)>), TriageError> {
    if overrides.is_empty() {
        return Err(TriageError::EmptyOverride);
    }
    let mut assessments = report.assessments.clone();
    let mut previous = Vec::with_capacity(overrides.len());
    for o in overrides {
        let a = assessments
            .iter_mut()
            .find(|a| a.criterion_id == o.criterion_id)
            .ok_or_else(|| TriageError::UnknownCriterion(o.criterion_id.clone()))?;
        previous.push((o.criterion_id.clone(), a.final_status));
        a.final_status = o.status;
    }
    let updated = determine(&report.patient_id, &report.trial_id, assessments, &trial.criteria)?;
    Ok((updated, previous))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReviewQueue {
    pub policy: TriagePolicy,
    items: Vec<TriageItem>,
    #[serde(skip)]
    index: HashMap<PairKey, usize>,
}

impl ReviewQueue {
    pub fn build(reports: &[EligibilityReport], policy: TriagePolicy) -> Self {
        let items = select_for_review(reports, &policy)
            .into_iter()
            .map(|r| TriageItem {
                patient_id: r.patient_id.clone(),
                trial_id: r.trial_id.clone(),
                original: r.clone(),
                report: r.clone(),
                disqualifying_count: r.disqualifying_count,
                state: ItemState::Pending,
                overrides: Vec::new(),
                claimed_by: None,
                opened_at: None,
                decided_at: None,
                review_duration_ms: None,
                reviewer: None,
                version: 0,
            })
            .collect();
        Self::from_items(policy, items)
    }

    pub fn from_items(policy: TriagePolicy, items: Vec<TriageItem>) -> Self {
        let index = items.iter().enumerate().map(|(i, it)| (it.key(), i)).collect();
        ReviewQueue { policy, items, index }
    }

    pub fn items(&self) -> &[TriageItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, key: &PairKey) -> Option<&TriageItem> {
        self.index.get(key).map(|&i| &self.items[i])
    }

    fn item_mut(&mut self, key: &PairKey, presented: u64) -> Result<&mut TriageItem, TriageError> {
        let i = *self
            .index
            .get(key)
            .ok_or_else(|| TriageError::UnknownItem(key.clone()))?;
        let item = &mut self.items[i];
        if item.version != presented {
            return Err(TriageError::VersionConflict {
                current: item.version,
                presented,
            });
        }
        Ok(item)
    }

    /// Exclusive claim; opening starts the review clock. Re-claiming one's
    /// own pending item is allowed and restarts nothing.
    pub fn claim(
        &mut self,
        key: &PairKey,
        reviewer: &str,
        version: u64,
        at: DateTime<Utc>,
    ) -> Result<&TriageItem, TriageError> {
        let item = self.item_mut(key, version)?;
        if item.state != ItemState::Pending {
            return Err(TriageError::NotPending(item.state));
        }
        match &item.claimed_by {
            Some(other) if other != reviewer => return Err(TriageError::ClaimedByOther(other.clone())),
            Some(_) => {}
            None => {
                item.claimed_by = Some(reviewer.to_string());
                item.opened_at = Some(at);
                item.version += 1;
            }
        }
        Ok(item)
    }

    fn decidable(item: &TriageItem, reviewer: &str) -> Result<(), TriageError> {
        if item.state != ItemState::Pending {
            return Err(TriageError::NotPending(item.state));
        }
        match &item.claimed_by {
            None => Err(TriageError::NotClaimed),
            Some(other) if other != reviewer => Err(TriageError::ClaimedByOther(other.clone())),
            Some(_) => Ok(()),
        }
    }

    fn close(item: &mut TriageItem, reviewer: &str, at: DateTime<Utc>, state: ItemState) {
        item.state = state;
        item.reviewer = Some(reviewer.to_string());
        item.decided_at = Some(at);
        item.review_duration_ms = item.opened_at.map(|o| (at - o).num_milliseconds());
        item.version += 1;
    }

    pub fn confirm(
        &mut self,
        key: &PairKey,
        reviewer: &str,
        version: u64,
        at: DateTime<Utc>,
    ) -> Result<&TriageItem, TriageError> {
        let item = self.item_mut(key, version)?;
        Self::decidable(item, reviewer)?;
        Self::close(item, reviewer, at, ItemState::Confirmed);
        Ok(item)
    }

    /// Applies criterion overrides; every override carrying a note becomes a
    /// knowledge entry scoped to its trial and criterion.
    #[allow(clippy::too_many_arguments)]
    pub fn override_item(
        &mut self,
        key: &PairKey,
        reviewer: &str,
        version: u64,
        overrides: &[OverrideRequest],
        trial: &Trial,
        kb: &mut KnowledgeBase,
        at: DateTime<Utc>,
    ) -> Result<&TriageItem, TriageError> {
        let item = self.item_mut(key, version)?;
        Self::decidable(item, reviewer)?;
        if trial.id != item.trial_id {
            return Err(TriageError::UnknownTrial(trial.id.clone()));
        }
        let (updated, previous) = apply_override(&item.report, trial, overrides)?;
        let mut applied = Vec::with_capacity(overrides.len());
        for (o, (_, prev)) in overrides.iter().zip(previous) {
            let note = o.note.as_ref().filter(|n| !n.trim().is_empty());
            let kb_entry_id = match note {
                Some(text) => Some(
                    kb.append(
                        NewEntry {
                            text: text.clone(),
                            error_mode: o.error_mode.unwrap_or(ErrorMode::Other),
                            scope: Some(EntryScope {
                                trial_id: item.trial_id.clone(),
                                criterion_id: Some(o.criterion_id.clone()),
                            }),
                            author: reviewer.to_string(),
                        },
                        at,
                    )?
                    .entry_id,
                ),
                None => None,
            };
            applied.push(AppliedOverride {
                criterion_id: o.criterion_id.clone(),
                previous: prev,
                status: o.status,
                note: note.cloned(),
                kb_entry_id,
            });
        }
        item.report = updated;
        item.overrides = applied;
        Self::close(item, reviewer, at, ItemState::Overridden);
        Ok(item)
    }

    pub fn unresolved(&self) -> usize {
        self.items.iter().filter(|i| i.state == ItemState::Pending).count()
    }
}

impl<'de> Deserialize<'de> for ReviewQueue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            policy: TriagePolicy,
            items: Vec<TriageItem>,
        }
        let raw = Raw::deserialize(d)?;
        Ok(ReviewQueue::from_items(raw.policy, raw.items))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    AiAcceptedPositive,
    AiAcceptedNegative,
    HumanConfirmed,
    HumanOverridden,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowOutcome {
    pub patient_id: PatientId,
    pub trial_id: TrialId,
    pub final_determination: Determination,
    pub provenance: Provenance,
    /// Count on the AI report, before any override.
    pub ai_disqualifying_count: usize,
}

/// One outcome per report. Unqueued reports keep the AI determination.
pub fn finalize(
    reports: &[EligibilityReport],
    queue: &ReviewQueue,
) -> Result<Vec<WorkflowOutcome>, TriageError> {
    let pending = queue.unresolved();
    if pending > 0 {
        return Err(TriageError::Incomplete(pending));
    }
    let mut outcomes: BTreeMap<PairKey, WorkflowOutcome> = BTreeMap::new();
    for r in reports {
        let key = PairKey::of(r);
        let outcome = match queue.get(&key) {
            Some(item) => WorkflowOutcome {
                patient_id: r.patient_id.clone(),
                trial_id: r.trial_id.clone(),
                final_determination: item.report.determination,
                provenance: match item.state {
                    ItemState::Overridden => Provenance::HumanOverridden,
                    _ => Provenance::HumanConfirmed,
                },
                ai_disqualifying_count: r.disqualifying_count,
            },
            None => WorkflowOutcome {
                patient_id: r.patient_id.clone(),
                trial_id: r.trial_id.clone(),
                final_determination: r.determination,
                provenance: match r.determination {
                    Determination::PotentiallyEligible => Provenance::AiAcceptedPositive,
                    Determination::NotEligible => Provenance::AiAcceptedNegative,
                },
                ai_disqualifying_count: r.disqualifying_count,
            },
        };
        outcomes.insert(key, outcome);
    }
    Ok(outcomes.into_values().collect())
}
