//! Patient-level determination from criterion statuses.
//!
//! A criterion is disqualifying when it is an inclusion criterion assessed
//! `NotMet` or an exclusion criterion assessed `Met`. `UnableToDetermine`
//! never disqualifies. One disqualifying criterion makes the patient
//! not eligible; otherwise the patient is potentially eligible.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assessment::CriterionAssessment;
use crate::corpus::PatientId;
use crate::protocol::{Criterion, CriterionId, CriterionKind, CriterionStatus, TrialId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Determination {
    PotentiallyEligible,
    NotEligible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriterionEffect {
    Qualifying,
    Disqualifying,
    Unable,
}

pub fn effect(kind: CriterionKind, status: CriterionStatus) -> CriterionEffect {
    use CriterionKind::*;
    use CriterionStatus::*;
    match (kind, status) {
        (_, UnableToDetermine) => CriterionEffect::Unable,
        (Inclusion, NotMet) | (Exclusion, Met) => CriterionEffect::Disqualifying,
        (Inclusion, Met) | (Exclusion, NotMet) => CriterionEffect::Qualifying,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tallies {
    pub qualifying: usize,
    pub disqualifying: usize,
    pub unable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EligibilityReport {
    pub patient_id: PatientId,
    pub trial_id: TrialId,
    pub determination: Determination,
    pub disqualifying_count: usize,
    pub tallies: Tallies,
    pub assessments: Vec<CriterionAssessment>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EligibilityError {
    #[error("no assessment for criterion `{0}`")]
    Missing(CriterionId),
    #[error("assessment for unknown criterion `{0}`")]
    Unknown(CriterionId),
    #[error("criterion `{0}` assessed more than once")]
    Duplicate(CriterionId),
    #[error("criterion `{id}` is {expected:?} but was assessed as {found:?}")]
    KindMismatch {
        id: CriterionId,
        expected: CriterionKind,
        found: CriterionKind,
    },
}

/// Pairs each criterion with its assessment, in criterion order.
fn align<'a>(
    assessments: &'a [CriterionAssessment],
    criteria: &'a [Criterion],
) -> Result<Vec<(&'a Criterion, &'a CriterionAssessment)>, EligibilityError> {
    let mut by_id: HashMap<&str, &CriterionAssessment> = HashMap::new();
    for a in assessments {
        if by_id.insert(a.criterion_id.as_str(), a).is_some() {
            return Err(EligibilityError::Duplicate(a.criterion_id.clone()));
        }
    }
    let mut out = Vec::with_capacity(criteria.len());
    for c in criteria {
        let a = by_id
            .remove(c.id.as_str())
            .ok_or_else(|| EligibilityError::Missing(c.id.clone()))?;
        if a.kind != c.kind {
            return Err(EligibilityError::KindMismatch {
                id: c.id.clone(),
                expected: c.kind,
                found: a.kind,
            });
        }
        out.push((c, a));
    }
    if let Some(a) = assessments
        .iter()
        .find(|a| by_id.contains_key(a.criterion_id.as_str()))
    {
        return Err(EligibilityError::Unknown(a.criterion_id.clone()));
    }
    Ok(out)
}

pub fn count_disqualifying(
    assessments: &[CriterionAssessment],
    criteria: &[Criterion],
) -> Result<usize, EligibilityError> {
    Ok(align(assessments, criteria)?
        .into_iter()
        .filter(|(c, a)| effect(c.kind, a.final_status) == CriterionEffect::Disqualifying)
        .count())
}

pub fn determine(
    patient_id: &str,
    trial_id: &str,
    assessments: Vec<CriterionAssessment>,
    criteria: &[Criterion],
) -> Result<EligibilityReport, EligibilityError> {
    let mut tallies = Tallies::default();
    for (c, a) in align(&assessments, criteria)? {
        match effect(c.kind, a.final_status) {
            CriterionEffect::Qualifying => tallies.qualifying += 1,
            CriterionEffect::Disqualifying => tallies.disqualifying += 1,
            CriterionEffect::Unable => tallies.unable += 1,
        }
    }
    let determination = if tallies.disqualifying >= 1 {
        Determination::NotEligible
    } else {
        Determination::PotentiallyEligible
    };
    Ok(EligibilityReport {
        patient_id: patient_id.to_string(),
        trial_id: trial_id.to_string(),
        determination,
        disqualifying_count: tallies.disqualifying,
        tallies,
        assessments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assessment::Adjudication;
    use crate::protocol::CriterionFlag;
    use proptest::prelude::*;

    fn criterion(i: usize, kind: CriterionKind) -> Criterion {
        Criterion {
            id: format!("c{i}"),
            kind,
            flag: CriterionFlag::Normal,
            text: "t".into(),
        }
    }

    fn assessed(c: &Criterion, status: CriterionStatus) -> CriterionAssessment {
        CriterionAssessment {
            criterion_id: c.id.clone(),
            kind: c.kind,
            final_status: status,
            opinions: Vec::new(),
            adjudication: Adjudication::Unanimous,
            routed: Vec::new(),
            routing_fallback: false,
            short_circuited: false,
        }
    }

    fn run(spec: &[(CriterionKind, CriterionStatus)]) -> EligibilityReport {
        let criteria: Vec<_> = spec.iter().enumerate().map(|(i, (k, _))| criterion(i, *k)).collect();
        let a = criteria.iter().zip(spec).map(|(c, (_, s))| assessed(c, *s)).collect();
        determine("p", "t", a, &criteria).unwrap()
    }

    use CriterionKind::{Exclusion as Ex, Inclusion as In};
    use CriterionStatus::{Met, NotMet, UnableToDetermine as Utd};

    #[test]
    fn rule_examples() {
        assert_eq!(run(&[(In, Met), (Ex, NotMet)]).disqualifying_count, 0);
        assert_eq!(run(&[(In, NotMet), (Ex, Met)]).disqualifying_count, 2);
        let r = run(&[(In, Utd), (Ex, Utd)]);
        assert_eq!(r.disqualifying_count, 0);
        assert_eq!(r.determination, Determination::PotentiallyEligible);
        assert_eq!(r.tallies.unable, 2);
        let r = run(&[(In, Met), (In, Met), (Ex, Met), (Ex, NotMet)]);
        assert_eq!(r.determination, Determination::NotEligible);
        assert_eq!(r.disqualifying_count, 1);
    }

    #[test]
    fn mismatched_assessments_are_rejected() {
        let criteria = vec![criterion(0, In), criterion(1, Ex)];
        let one = vec![assessed(&criteria[0], Met)];
        assert_eq!(
            count_disqualifying(&one, &criteria),
            Err(EligibilityError::Missing("c1".into()))
        );
        let mut extra: Vec<_> = criteria.iter().map(|c| assessed(c, Met)).collect();
        extra.push(assessed(&criterion(9, In), Met));
        assert_eq!(
            count_disqualifying(&extra, &criteria),
            Err(EligibilityError::Unknown("c9".into()))
        );
        let dup = vec![assessed(&criteria[0], Met), assessed(&criteria[0], Met)];
        assert!(matches!(
            count_disqualifying(&dup, &criteria),
            Err(EligibilityError::Duplicate(_))
        ));
    }

    fn arb_spec() -> impl Strategy<Value = Vec<(CriterionKind, CriterionStatus)>> {
        prop::collection::vec(
            (
                prop_oneof![Just(In), Just(Ex)],
                prop_oneof![Just(Met), Just(NotMet), Just(Utd)],
            ),
            0..12,
        )
    }

    proptest! {
        #[test]
        fn tallies_sum_to_criterion_count(spec in arb_spec()) {
            let r = run(&spec);
            prop_assert_eq!(r.tallies.qualifying + r.tallies.disqualifying + r.tallies.unable, spec.len());
            prop_assert_eq!(r.determination == Determination::NotEligible, r.disqualifying_count >= 1);
        }

        #[test]
        fn determination_is_permutation_invariant(spec in arb_spec(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let criteria: Vec<_> = spec.iter().enumerate().map(|(i, (k, _))| criterion(i, *k)).collect();
            let mut a: Vec<_> = criteria.iter().zip(&spec).map(|(c, (_, s))| assessed(c, *s)).collect();
            let base = determine("p", "t", a.clone(), &criteria).unwrap();
            a.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled = determine("p", "t", a, &criteria).unwrap();
            prop_assert_eq!(base.determination, shuffled.determination);
            prop_assert_eq!(base.tallies, shuffled.tallies);
        }

        #[test]
        fn flipping_to_disqualifying_is_monotone(spec in arb_spec(), pick in any::<prop::sample::Index>()) {
            prop_assume!(!spec.is_empty());
            let i = pick.index(spec.len());
            let before = run(&spec);
            let mut flipped = spec.clone();
            flipped[i].1 = match flipped[i].0 { In => NotMet, Ex => Met };
            let after = run(&flipped);
            prop_assert!(after.disqualifying_count >= before.disqualifying_count);
            if before.determination == Determination::NotEligible {
                prop_assert_eq!(after.determination, Determination::NotEligible);
            }
        }
    }
}
