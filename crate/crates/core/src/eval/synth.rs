//! Deterministic synthetic cohort with scripted model behavior.
//!
//! Every patient is screened for one trial. Each assessable criterion gets one
//! short note in a fixed specialty stating the ground truth, tagged with a
//! reference marker `[<trial> | <criterion>: met]` or `[... : not met]`. The
//! scripted backend routes each criterion to the specialty of its note and
//! answers from the marker it sees among the retrieved excerpts, except where
//! an error was injected for that pair, in which case it answers the injected
//! status. A retrieval miss degrades to `Unable to determine`.
//!
//! Injected errors by mode:
//! * domain knowledge, logical: the criterion's effect is flipped
//!   (qualifying ↔ disqualifying);
//! * missing information: the answer becomes `Unable to determine`;
//! * irrelevant criterion: a qualifying criterion is reported disqualifying.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Label, LabelSource, LabeledPair};
use crate::corpus::{ingest_records, Corpus, PatientDocument, Specialty};
use crate::eligibility::{effect, CriterionEffect};
use crate::gateway::{ScriptRule, ScriptedBackend};
use crate::kb::{ErrorMode, KnowledgeBase};
use crate::pipeline::PairRequest;
use crate::protocol::{Criterion, CriterionFlag, CriterionId, CriterionKind, CriterionStatus, Trial, TrialId};
use crate::triage::{OverrideRequest, PairKey, ReviewQueue, TriageError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorRates {
    #[serde(default)]
    pub domain_knowledge: f64,
    #[serde(default)]
    pub logical: f64,
    #[serde(default)]
    pub missing_information: f64,
    #[serde(default)]
    pub irrelevant_criterion: f64,
}

impl ErrorRates {
    fn modes(&self) -> [(ErrorMode, f64); 4] {
        [
            (ErrorMode::DomainKnowledge, self.domain_knowledge),
            (ErrorMode::Logical, self.logical),
            (ErrorMode::MissingInformation, self.missing_information),
            (ErrorMode::IrrelevantCriterion, self.irrelevant_criterion),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialCohortSpec {
    pub trial_id: TrialId,
    pub eligible: usize,
    pub not_eligible: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub version: u32,
    pub determination_date: NaiveDate,
    /// Cap on injected errors per (patient, trial) pair.
    pub max_errors_per_pair: usize,
    /// Not-eligible patients have between 1 and this many truly disqualifying criteria.
    pub max_true_disqualifying: usize,
    #[serde(default)]
    pub error_rates: ErrorRates,
    pub trials: Vec<TrialCohortSpec>,
}

impl CohortSpec {
    pub fn packaged() -> Self {
        Self::parse(include_str!("../../data/cohort/default.toml")).expect("packaged cohort spec is valid")
    }

    pub fn parse(source: &str) -> Result<Self, String> {
        toml::from_str(source).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        std::fs::read_to_string(path)
            .map_err(|e| e.to_string())
            .and_then(|source| Self::parse(&source))
            .map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn with_rates(mut self, rates: ErrorRates) -> Self {
        self.error_rates = rates;
        self
    }

    fn validate(&self, trials: &[Trial]) -> Result<(), String> {
        if self.version != 1 {
            return Err(format!("unsupported cohort spec version {}", self.version));
        }
        let mut sum = 0.0;
        for (mode, r) in self.error_rates.modes() {
            if !(0.0..=1.0).contains(&r) {
                return Err(format!("error rate for {mode:?} is outside [0, 1]: {r}"));
            }
            sum += r;
        }
        if sum > 1.0 + 1e-12 {
            return Err(format!("error rates sum to {sum}, above 1"));
        }
        if self.max_true_disqualifying == 0 {
            return Err("max_true_disqualifying must be at least 1".into());
        }
        for t in &self.trials {
            let Some(trial) = trials.iter().find(|x| x.id == t.trial_id) else {
                return Err(format!("unknown trial `{}`", t.trial_id));
            };
            if t.not_eligible > 0 && assessable(trial).is_empty() {
                return Err(format!("trial `{}` has no assessable criteria", t.trial_id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedError {
    pub patient_id: String,
    pub trial_id: TrialId,
    pub criterion_id: CriterionId,
    pub mode: ErrorMode,
    pub truth: CriterionStatus,
    pub ai: CriterionStatus,
}

#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub pairs: Vec<LabeledPair>,
    pub documents: Vec<PatientDocument>,
    /// Ground-truth status of every criterion, flagged ones included.
    pub truth: BTreeMap<PairKey, BTreeMap<CriterionId, CriterionStatus>>,
    pub injected: Vec<InjectedError>,
    pub rules: Vec<ScriptRule>,
}

impl SyntheticCohort {
    pub fn backend(&self) -> ScriptedBackend {
        ScriptedBackend::new(self.rules.clone())
    }

    pub fn corpus(&self) -> Corpus {
        ingest_records(self.documents.iter().cloned()).expect("synthetic documents are unique")
    }

    pub fn pair_requests(&self) -> Vec<PairRequest> {
        self.pairs
            .iter()
            .map(|p| PairRequest {
                patient_id: p.patient_id.clone(),
                trial_id: p.trial_id.clone(),
                cutoff: Some(p.determination_date),
            })
            .collect()
    }
}

const NOTE_SPECIALTIES: [(Specialty, &str); 5] = [
    (Specialty::Pathology, "Surgical Pathology Report"),
    (Specialty::Radiology, "Radiology Report"),
    (Specialty::SurgicalOncology, "Operative Note"),
    (Specialty::MedicalOncology, "Medical Oncology Progress Note"),
    (Specialty::RadiationOncology, "Radiation Oncology Consult"),
];

fn assessable(trial: &Trial) -> Vec<&Criterion> {
    trial.criteria.iter().filter(|c| c.flag == CriterionFlag::Normal).collect()
}

fn qualifying_status(kind: CriterionKind) -> CriterionStatus {
    match kind {
        CriterionKind::Inclusion => CriterionStatus::Met,
        CriterionKind::Exclusion => CriterionStatus::NotMet,
    }
}

fn disqualifying_status(kind: CriterionKind) -> CriterionStatus {
    match kind {
        CriterionKind::Inclusion => CriterionStatus::NotMet,
        CriterionKind::Exclusion => CriterionStatus::Met,
    }
}

fn marker(trial_id: &str, criterion_id: &str, status: CriterionStatus) -> String {
    format!("[{trial_id} | {criterion_id}: {}]", status.label().to_ascii_lowercase())
}

fn inject(mode: ErrorMode, kind: CriterionKind, truth: CriterionStatus) -> Option<CriterionStatus> {
    let out = match mode {
        ErrorMode::DomainKnowledge | ErrorMode::Logical | ErrorMode::Other => match effect(kind, truth) {
            CriterionEffect::Qualifying => disqualifying_status(kind),
            CriterionEffect::Disqualifying => qualifying_status(kind),
            CriterionEffect::Unable => return None,
        },
        ErrorMode::MissingInformation => CriterionStatus::UnableToDetermine,
        ErrorMode::IrrelevantCriterion => match effect(kind, truth) {
            CriterionEffect::Qualifying => disqualifying_status(kind),
            _ => return None,
        },
    };
    (out != truth).then_some(out)
}

fn reply(status: CriterionStatus, why: &str) -> String {
    format!("{why}\nDetermination: {}", status.label())
}

/// Builds the cohort described by `spec`. Identical inputs give identical cohorts.
pub fn generate_synthetic_cohort(
    spec: &CohortSpec,
    trials: &[Trial],
    seed: u64,
) -> Result<SyntheticCohort, String> {
    spec.validate(trials)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    let mut documents = Vec::new();
    let mut truth_map = BTreeMap::new();
    let mut injected = Vec::new();
    let mut error_rules = Vec::new();

    for ts in &spec.trials {
        let trial = trials.iter().find(|t| t.id == ts.trial_id).unwrap();
        let normals = assessable(trial);
        for i in 0..ts.eligible + ts.not_eligible {
            let patient_id = format!("SYN-{}-{:03}", trial.id, i + 1);
            let label = if i < ts.eligible { Label::Eligible } else { Label::NotEligible };
            let mut truth: BTreeMap<CriterionId, CriterionStatus> = BTreeMap::new();
            for c in &trial.criteria {
                let s = c.resolve_flagged().unwrap_or_else(|| qualifying_status(c.kind));
                truth.insert(c.id.clone(), s);
            }
            if label == Label::NotEligible {
                let d = rng.gen_range(1..=spec.max_true_disqualifying.min(normals.len()));
                for idx in sample(&mut rng, normals.len(), d).into_iter() {
                    let c = normals[idx];
                    truth.insert(c.id.clone(), disqualifying_status(c.kind));
                }
            }

            let mut errors = 0;
            for c in &normals {
                let u: f64 = rng.gen();
                if errors >= spec.max_errors_per_pair {
                    continue;
                }
                let mut acc = 0.0;
                let mode = spec.error_rates.modes().into_iter().find_map(|(m, r)| {
                    acc += r;
                    (u < acc).then_some(m)
                });
                let Some(mode) = mode else { continue };
                let t = truth[&c.id];
                let Some(ai) = inject(mode, c.kind, t) else { continue };
                errors += 1;
                error_rules.push(
                    ScriptRule::new(reply(ai, "On review of the excerpts the requirement is judged as follows."))
                        .user(format!("Patient: {patient_id}\n"))
                        .user(format!("Criterion ID: {}\n", c.id))
                        .user(marker(&trial.id, &c.id, t)),
                );
                injected.push(InjectedError {
                    patient_id: patient_id.clone(),
                    trial_id: trial.id.clone(),
                    criterion_id: c.id.clone(),
                    mode,
                    truth: t,
                    ai,
                });
            }

            let date = spec.determination_date;
            documents.push(PatientDocument {
                doc_id: format!("{patient_id}-hp"),
                patient_id: patient_id.clone(),
                note_type: "History and Physical".into(),
                created_date: date - Duration::days(120),
                text: format!(
                    "History and Physical for patient {patient_id}. Presents for evaluation of newly diagnosed breast cancer. \
                     Past medical history reviewed. Medications and allergies reconciled. Performance status discussed with the patient."
                ),
            });
            for (n, c) in normals.iter().enumerate() {
                let (_, note_type) = NOTE_SPECIALTIES[n % NOTE_SPECIALTIES.len()];
                let t = truth[&c.id];
                let finding = match effect(c.kind, t) {
                    CriterionEffect::Qualifying if c.kind == CriterionKind::Inclusion => {
                        "The documented findings satisfy this requirement."
                    }
                    CriterionEffect::Qualifying => "The documented findings show this condition is absent.",
                    _ if c.kind == CriterionKind::Inclusion => {
                        "The documented findings do not satisfy this requirement."
                    }
                    _ => "The documented findings show this condition is present.",
                };
                documents.push(PatientDocument {
                    doc_id: format!("{patient_id}-n{:02}", n + 1),
                    patient_id: patient_id.clone(),
                    note_type: note_type.into(),
                    created_date: date - Duration::days(10 + n as i64),
                    text: format!(
                        "{note_type} for patient {patient_id}.\nRelevant to the requirement: {}\n{finding}\nScreening reference {}.",
                        c.text,
                        marker(&trial.id, &c.id, t)
                    ),
                });
            }

            pairs.push(LabeledPair {
                patient_id: patient_id.clone(),
                trial_id: trial.id.clone(),
                label,
                label_source: LabelSource::Original,
                determination_date: spec.determination_date,
            });
            truth_map.insert(PairKey::new(trial.id.clone(), patient_id), truth);
        }
    }

    let mut rules = error_rules;
    for ts in &spec.trials {
        let trial = trials.iter().find(|t| t.id == ts.trial_id).unwrap();
        for (n, c) in assessable(trial).into_iter().enumerate() {
            let (specialty, _) = NOTE_SPECIALTIES[n % NOTE_SPECIALTIES.len()];
            rules.push(
                ScriptRule::new(format!(
                    "The {} notes address this requirement.\nExperts: {}",
                    specialty.slug(),
                    specialty.role_name()
                ))
                .system("Role: coordinator\n")
                .user(format!("Trial: {}\n", trial.id))
                .user(format!("Criterion ID: {}\n", c.id)),
            );
            for s in [CriterionStatus::Met, CriterionStatus::NotMet] {
                rules.push(
                    ScriptRule::new(reply(s, "The excerpts state the finding explicitly."))
                        .user(format!("Criterion ID: {}\n", c.id))
                        .user(marker(&trial.id, &c.id, s)),
                );
            }
        }
    }
    rules.push(
        ScriptRule::new(reply(
            CriterionStatus::UnableToDetermine,
            "The excerpts do not address this requirement.",
        ))
        .user("Criterion ID: "),
    );

    Ok(SyntheticCohort {
        pairs,
        documents,
        truth: truth_map,
        injected,
        rules,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSummary {
    pub reviewed: usize,
    pub confirmed: usize,
    pub overridden: usize,
    pub kb_entries: usize,
}

/// Resolves every pending item the way an infallible coordinator would:
/// each criterion whose status differs from the truth is overridden, with a
/// note, and items without such criteria are confirmed.
pub fn simulate_perfect_review(
    queue: &mut ReviewQueue,
    cohort: &SyntheticCohort,
    trials: &[Trial],
    kb: &mut KnowledgeBase,
    reviewer: &str,
    start: DateTime<Utc>,
) -> Result<ReviewSummary, TriageError> {
    let mut summary = ReviewSummary::default();
    let keys: Vec<(PairKey, u64)> = queue.items().iter().map(|i| (i.key(), i.version)).collect();
    for (n, (key, version)) in keys.into_iter().enumerate() {
        let opened = start + Duration::minutes(2 * n as i64);
        let decided = opened + Duration::seconds(45);
        let item = queue.claim(&key, reviewer, version, opened)?;
        let version = item.version;
        let truth = cohort.truth.get(&key).cloned().unwrap_or_default();
        let trial = trials
            .iter()
            .find(|t| t.id == key.trial_id)
            .ok_or_else(|| TriageError::UnknownTrial(key.trial_id.clone()))?;
        let overrides: Vec<OverrideRequest> = item
            .report
            .assessments
            .iter()
            .filter_map(|a| {
                let t = *truth.get(&a.criterion_id)?;
                if t == a.final_status {
                    return None;
                }
                let mode = cohort
                    .injected
                    .iter()
                    .find(|e| e.patient_id == key.patient_id && e.trial_id == key.trial_id && e.criterion_id == a.criterion_id)
                    .map(|e| e.mode);
                let text = trial.criterion(&a.criterion_id).map(|c| c.text.as_str()).unwrap_or("");
                Some(OverrideRequest {
                    criterion_id: a.criterion_id.clone(),
                    status: t,
                    note: Some(format!(
                        "For {} {} (\"{}\"), the record supports \"{}\"; use the documented finding directly.",
                        key.trial_id,
                        a.criterion_id,
                        text,
                        t.label()
                    )),
                    error_mode: mode,
                })
            })
            .collect();
        summary.reviewed += 1;
        if overrides.is_empty() {
            queue.confirm(&key, reviewer, version, decided)?;
            summary.confirmed += 1;
        } else {
            summary.kb_entries += overrides.len();
            queue.override_item(&key, reviewer, version, &overrides, trial, kb, decided)?;
            summary.overridden += 1;
        }
    }
    Ok(summary)
}
