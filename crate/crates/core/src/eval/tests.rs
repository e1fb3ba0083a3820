// Oracle values are kept with every digit the oracle printed.
#![allow(clippy::excessive_precision)]

use super::*;
use crate::eligibility::{Determination, EligibilityReport, Tallies};
use crate::fixtures::{reference_labels, six_trial_protocols, REFERENCE_COHORT};
use crate::protocol::CriterionStatus;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use std::collections::BTreeMap;

fn date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2022, 3, 1).unwrap()
}

fn pair(patient: &str, trial: &str, label: Label, source: LabelSource) -> LabeledPair {
    LabeledPair {
        patient_id: patient.into(),
        trial_id: trial.into(),
        label,
        label_source: source,
        determination_date: date(),
    }
}

fn stratum(trial: &str, label: Label, n: usize, prefix: &str) -> Vec<LabeledPair> {
    (0..n)
        .map(|i| pair(&format!("{prefix}{i:03}"), trial, label, LabelSource::Original))
        .collect()
}

fn count(pairs: &[LabeledPair], trial: &str, label: Label, source: Option<LabelSource>) -> usize {
    pairs
        .iter()
        .filter(|p| p.trial_id == trial && p.label == label && source.is_none_or(|s| p.label_source == s))
        .count()
}

// ---- cross-trial augmentation ----

#[test]
fn reference_cohort_augments_to_expected_totals() {
    let trials = six_trial_protocols();
    let labels = reference_labels();
    assert_eq!(labels.len(), 731);
    let out = augment_cross_trial(&labels, &trials).unwrap();
    let cross: Vec<_> = out.iter().filter(|p| p.label_source == LabelSource::CrossTrial).collect();
    assert_eq!(cross.len(), 1564);
    assert_eq!(out.len(), 2295);
    let patients: BTreeSet<_> = out.iter().map(|p| &p.patient_id).collect();
    assert_eq!(patients.len(), 731);

    let expected_cross: BTreeMap<&str, usize> = [
        ("16-323", 86),
        ("18-486", 610),
        ("19-300", 86),
        ("19-410", 86),
        ("21-283", 86),
        ("22-259", 610),
    ]
    .into();
    for (trial, eligible, ineligible) in REFERENCE_COHORT {
        assert_eq!(count(&out, trial, Label::Eligible, None), eligible);
        assert_eq!(count(&out, trial, Label::NotEligible, Some(LabelSource::Original)), ineligible);
        assert_eq!(
            count(&out, trial, Label::NotEligible, Some(LabelSource::CrossTrial)),
            expected_cross[trial],
            "{trial}"
        );
    }
}

#[test]
fn eligible_on_metastatic_required_trial_is_negative_for_all_excluded_trials() {
    let trials = six_trial_protocols();
    let out = augment_cross_trial(&[pair("p1", "18-486", Label::Eligible, LabelSource::Original)], &trials).unwrap();
    let negatives: BTreeSet<&str> = out
        .iter()
        .filter(|p| p.label_source == LabelSource::CrossTrial)
        .map(|p| p.trial_id.as_str())
        .collect();
    assert_eq!(negatives, ["16-323", "19-300", "19-410", "21-283"].into());
    assert!(out.iter().all(|p| p.determination_date == date()));
}

#[test]
fn ineligible_pairs_do_not_generate_negatives_and_existing_labels_win() {
    let trials = six_trial_protocols();
    let input = [
        pair("p1", "22-259", Label::NotEligible, LabelSource::Original),
        pair("p2", "22-259", Label::Eligible, LabelSource::Original),
        pair("p2", "16-323", Label::Eligible, LabelSource::Original),
    ];
    let out = augment_cross_trial(&input, &trials).unwrap();
    // p2 already has a label on 16-323 and is eligible on 16-323 (excluded group),
    // which adds p2 on 18-486; 22-259 is already labeled.
    let added: Vec<_> = out[3..].iter().map(|p| (p.patient_id.as_str(), p.trial_id.as_str())).collect();
    assert_eq!(
        added,
        [("p2", "19-300"), ("p2", "19-410"), ("p2", "21-283"), ("p2", "18-486")]
    );
}

#[test]
fn duplicate_labels_are_rejected() {
    let p = pair("p1", "18-486", Label::Eligible, LabelSource::Original);
    let err = augment_cross_trial(&[p.clone(), p], &six_trial_protocols()).unwrap_err();
    assert!(matches!(err, DatasetError::DuplicatePair { .. }));
}

// ---- splitting and sampling ----

#[test]
fn split_sizes_follow_floor_rule() {
    let mut pairs = stratum("A", Label::Eligible, 10, "a");
    pairs.extend(stratum("B", Label::Eligible, 11, "b"));
    pairs.extend(stratum("C", Label::NotEligible, 1, "c"));
    let (train, test) = stratified_split(&pairs, 0.5, 7).unwrap();
    assert_eq!(count(&train, "A", Label::Eligible, None), 5);
    assert_eq!(count(&test, "A", Label::Eligible, None), 5);
    assert_eq!(count(&train, "B", Label::Eligible, None), 6);
    assert_eq!(count(&test, "B", Label::Eligible, None), 5);
    assert_eq!(count(&train, "C", Label::NotEligible, None), 1);
    assert_eq!(count(&test, "C", Label::NotEligible, None), 0);
}

#[test]
fn split_rejects_degenerate_fraction() {
    let pairs = stratum("A", Label::Eligible, 4, "a");
    assert_eq!(stratified_split(&pairs, 0.0, 1).unwrap_err(), DatasetError::Fraction(0.0));
    assert_eq!(stratified_split(&pairs, 1.0, 1).unwrap_err(), DatasetError::Fraction(1.0));
}

#[test]
fn split_of_reference_cohort_is_seed_stable() {
    let trials = six_trial_protocols();
    let all = augment_cross_trial(&reference_labels(), &trials).unwrap();
    let a = stratified_split(&all, 0.5, 42).unwrap();
    let b = stratified_split(&all, 0.5, 42).unwrap();
    assert_eq!(a, b);
    let c = stratified_split(&all, 0.5, 43).unwrap();
    assert_ne!(a.1, c.1);
    assert_eq!(a.0.len() + a.1.len(), all.len());
}

#[test]
fn eval_sample_draws_five_and_five_per_trial() {
    let trials = six_trial_protocols();
    let all = augment_cross_trial(&reference_labels(), &trials).unwrap();
    let (_, test) = stratified_split(&all, 0.5, 42).unwrap();
    let sample = stratified_eval_sample(&test, 5, 5, 42).unwrap();
    assert_eq!(sample.len(), 60);
    for t in &trials {
        assert_eq!(count(&sample, &t.id, Label::Eligible, None), 5);
        assert_eq!(count(&sample, &t.id, Label::NotEligible, None), 5);
        // Every trial keeps its test-side original negatives before cross-trial ones.
        let orig_in_test = count(&test, &t.id, Label::NotEligible, Some(LabelSource::Original));
        assert_eq!(
            count(&sample, &t.id, Label::NotEligible, Some(LabelSource::Original)),
            orig_in_test.min(5)
        );
    }
}

#[test]
fn eval_sample_prefers_original_negatives() {
    let mut test = stratum("T", Label::Eligible, 5, "e");
    test.extend((0..2).map(|i| pair(&format!("o{i}"), "T", Label::NotEligible, LabelSource::Original)));
    test.extend((0..9).map(|i| pair(&format!("x{i}"), "T", Label::NotEligible, LabelSource::CrossTrial)));
    let sample = stratified_eval_sample(&test, 5, 5, 3).unwrap();
    assert_eq!(count(&sample, "T", Label::NotEligible, Some(LabelSource::Original)), 2);
    assert_eq!(count(&sample, "T", Label::NotEligible, Some(LabelSource::CrossTrial)), 3);
}

#[test]
fn eval_sample_reports_every_deficit() {
    let mut test = stratum("T", Label::Eligible, 3, "e");
    test.extend(stratum("T", Label::NotEligible, 5, "n"));
    test.extend(stratum("U", Label::Eligible, 5, "f"));
    let err = stratified_eval_sample(&test, 5, 5, 0).unwrap_err();
    let DatasetError::Insufficient(d) = err else { panic!("{err:?}") };
    assert_eq!(
        d,
        vec![
            Deficit { trial_id: "T".into(), label: Label::Eligible, needed: 5, available: 3 },
            Deficit { trial_id: "U".into(), label: Label::NotEligible, needed: 5, available: 0 },
        ]
    );
}

#[test]
fn matched_subset_takes_stratum_minimum() {
    let mut a = stratum("T", Label::Eligible, 5, "a");
    a.extend(stratum("T", Label::NotEligible, 2, "an"));
    a.extend(stratum("V", Label::Eligible, 3, "av"));
    let mut b = stratum("T", Label::Eligible, 3, "b");
    b.extend(stratum("T", Label::NotEligible, 4, "bn"));
    let (ma, mb) = matched_subset(&a, &b, 9).unwrap();
    assert_eq!(ma.len(), 5);
    assert_eq!(mb.len(), 5);
    for arm in [&ma, &mb] {
        assert_eq!(count(arm, "T", Label::Eligible, None), 3);
        assert_eq!(count(arm, "T", Label::NotEligible, None), 2);
        assert_eq!(count(arm, "V", Label::Eligible, None), 0);
    }
    assert_eq!(matched_subset(&a[7..], &b, 9).unwrap_err(), DatasetError::NoCommonStrata);
}

#[test]
fn matched_subset_equalizes_prevalence() {
    let mut a = stratum("T", Label::Eligible, 6, "ae");
    a.extend(stratum("T", Label::NotEligible, 4, "an"));
    let mut b = stratum("T", Label::Eligible, 3, "be");
    b.extend(stratum("T", Label::NotEligible, 7, "bn"));
    let (ma, mb) = matched_subset(&a, &b, 1).unwrap();
    for arm in [&ma, &mb] {
        assert_eq!(arm.len(), 7);
        assert_eq!(count(arm, "T", Label::Eligible, None), 3);
    }
}

#[test]
fn matched_subset_of_identical_arms_is_identity() {
    let mut a = stratum("T", Label::Eligible, 4, "a");
    a.extend(stratum("U", Label::NotEligible, 3, "b"));
    let (ma, mb) = matched_subset(&a, &a, 5).unwrap();
    assert_eq!(ma, a);
    assert_eq!(mb, a);
}

// ---- statistics ----

const Z95: f64 = 1.959_963_984_540_054_2;

#[test]
fn wilson_matches_reference_values() {
    let cases: [(u64, u64, f64, f64, f64); 6] = [
        (0, 10, 0.95, 0.0, 0.277_532_799_862_889_25),
        (10, 10, 0.95, 0.722_467_200_137_110_75, 1.0),
        (7, 20, 0.95, 0.181_191_824_101_082_05, 0.567_145_723_314_763_77),
        (1, 1, 0.95, 0.206_549_314_377_237_39, 1.0),
        (45, 60, 0.9, 0.648_624_241_268_693_83, 0.829_802_359_434_671_02),
        (59, 60, 0.99, 0.872_374_588_512_394_36, 0.998_040_208_516_211_21),
    ];
    for (k, n, conf, lo, hi) in cases {
        let (l, h) = wilson_interval(k, n, conf).unwrap();
        assert_abs_diff_eq!(l, lo, epsilon = 1e-12);
        assert_abs_diff_eq!(h, hi, epsilon = 1e-12);
    }
}

#[test]
fn wilson_bounds_solve_the_score_equation() {
    // A Wilson bound p0 satisfies (k/n - p0)^2 = z^2 p0 (1 - p0) / n.
    for (k, n) in [(3u64, 17u64), (50, 51), (12, 400)] {
        let (lo, hi) = wilson_interval(k, n, 0.95).unwrap();
        let phat = k as f64 / n as f64;
        for p0 in [lo, hi] {
            let lhs = (phat - p0).powi(2);
            let rhs = Z95 * Z95 * p0 * (1.0 - p0) / n as f64;
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-13);
        }
    }
}

#[test]
fn wilson_rejects_bad_input() {
    assert_eq!(wilson_interval(0, 0, 0.95).unwrap_err(), StatsError::EmptySample);
    assert_eq!(wilson_interval(3, 2, 0.95).unwrap_err(), StatsError::TooManySuccesses { k: 3, n: 2 });
    assert!(matches!(wilson_interval(1, 2, 1.0), Err(StatsError::Confidence(_))));
}

#[test]
fn two_proportion_matches_reference_values() {
    assert_abs_diff_eq!(two_proportion_test(969, 1000, 952, 1000).unwrap(), 0.050_987_912_190_834_74, epsilon = 1e-12);
    assert_abs_diff_eq!(two_proportion_test(30, 31, 59, 62).unwrap(), 0.717_792_157_258_149_71, epsilon = 1e-12);
    assert_eq!(two_proportion_test(0, 10, 0, 20).unwrap(), 1.0);
    assert_eq!(two_proportion_test(10, 10, 20, 20).unwrap(), 1.0);
    assert_eq!(two_proportion_test(5, 10, 10, 20).unwrap(), 1.0);
    assert_eq!(two_proportion_test(1, 0, 1, 1).unwrap_err(), StatsError::EmptySample);
}

fn prediction(patient: &str, trial: &str, d: Determination) -> (String, String, Determination) {
    (patient.into(), trial.into(), d)
}

#[test]
fn confusion_counts_each_cell() {
    let labels = [
        pair("a", "T", Label::Eligible, LabelSource::Original),
        pair("b", "T", Label::Eligible, LabelSource::Original),
        pair("c", "T", Label::NotEligible, LabelSource::Original),
        pair("d", "T", Label::NotEligible, LabelSource::CrossTrial),
        pair("e", "T", Label::NotEligible, LabelSource::Original),
    ];
    let preds = [
        prediction("a", "T", Determination::PotentiallyEligible),
        prediction("b", "T", Determination::NotEligible),
        prediction("c", "T", Determination::PotentiallyEligible),
        prediction("d", "T", Determination::NotEligible),
        prediction("e", "T", Determination::NotEligible),
    ];
    let m = confusion(preds.iter().map(|(p, t, d)| (p.as_str(), t.as_str(), *d)), &labels).unwrap();
    assert_eq!(m, ConfusionMatrix { tp: 1, fn_: 1, fp: 1, tn: 2 });
    let s = metrics(&m, 0.95);
    assert_eq!(s.accuracy.unwrap().point, 0.6);
    assert_eq!(s.sensitivity.unwrap().point, 0.5);
    assert_abs_diff_eq!(s.specificity.unwrap().point, 2.0 / 3.0);
    assert_eq!(s.ppv.unwrap().point, 0.5);
    assert_abs_diff_eq!(s.npv.unwrap().point, 2.0 / 3.0);
    assert!(s.to_table().contains("sensitivity"));

    let missing = confusion(preds[..4].iter().map(|(p, t, d)| (p.as_str(), t.as_str(), *d)), &labels);
    assert_eq!(missing.unwrap_err(), StatsError::Uncovered(1));
    let unlabeled = confusion([("z", "T", Determination::NotEligible)], &labels);
    assert!(matches!(unlabeled, Err(StatsError::Unlabeled(..))));
}

#[test]
fn confusion_matches_independent_tally_on_fifty_pairs() {
    let labels: Vec<_> = (0..50)
        .map(|i| {
            let label = if (i * 7 + 3) % 5 < 2 { Label::Eligible } else { Label::NotEligible };
            pair(&format!("p{i:02}"), &format!("T{}", i % 3), label, LabelSource::Original)
        })
        .collect();
    let preds: Vec<_> = (0..50)
        .rev()
        .map(|i| {
            let d = if (i * 11 + 1) % 4 != 0 { Determination::PotentiallyEligible } else { Determination::NotEligible };
            prediction(&format!("p{i:02}"), &format!("T{}", i % 3), d)
        })
        .collect();
    let m = confusion(preds.iter().map(|(p, t, d)| (p.as_str(), t.as_str(), *d)), &labels).unwrap();
    assert_eq!(m, ConfusionMatrix { tp: 14, fn_: 6, fp: 23, tn: 7 });
    assert_eq!(metrics(&m, 0.95).accuracy.unwrap().point, 21.0 / 50.0);
}

#[test]
fn confusion_trivial_predictors() {
    let labels = [
        pair("a", "T", Label::Eligible, LabelSource::Original),
        pair("b", "T", Label::Eligible, LabelSource::Original),
        pair("c", "T", Label::Eligible, LabelSource::Original),
        pair("d", "T", Label::NotEligible, LabelSource::Original),
        pair("e", "T", Label::NotEligible, LabelSource::Original),
    ];
    let perfect = labels.iter().map(|l| {
        let d = if l.label == Label::Eligible { Determination::PotentiallyEligible } else { Determination::NotEligible };
        (l.patient_id.as_str(), l.trial_id.as_str(), d)
    });
    assert_eq!(confusion(perfect, &labels).unwrap(), ConfusionMatrix { tp: 3, fn_: 0, fp: 0, tn: 2 });
    let all_pos = labels.iter().map(|l| (l.patient_id.as_str(), l.trial_id.as_str(), Determination::PotentiallyEligible));
    assert_eq!(confusion(all_pos, &labels).unwrap(), ConfusionMatrix { tp: 3, fn_: 0, fp: 2, tn: 0 });
}

#[test]
fn metrics_with_empty_denominator_are_none() {
    let m = ConfusionMatrix { tp: 0, fn_: 0, fp: 0, tn: 4 };
    let s = metrics(&m, 0.95);
    assert!(s.sensitivity.is_none());
    assert!(s.ppv.is_none());
    assert_eq!(s.specificity.unwrap().point, 1.0);
    assert!(s.to_table().contains("n/a"));
}

fn report(patient: &str, trial: &str, count: usize) -> EligibilityReport {
    EligibilityReport {
        patient_id: patient.into(),
        trial_id: trial.into(),
        determination: if count == 0 { Determination::PotentiallyEligible } else { Determination::NotEligible },
        disqualifying_count: count,
        tallies: Tallies { qualifying: 0, disqualifying: count, unable: 0 },
        assessments: vec![],
    }
}

#[test]
fn histogram_small_cases() {
    assert!(disqualifying_histogram(&[], &[]).is_empty());
    let labels = [
        pair("a", "T", Label::NotEligible, LabelSource::Original),
        pair("b", "T", Label::Eligible, LabelSource::Original),
        pair("c", "T", Label::NotEligible, LabelSource::Original),
    ];
    let reports = [report("a", "T", 1), report("b", "T", 1), report("c", "T", 2)];
    let expected: BTreeMap<usize, HistogramBin> = [
        (1, HistogramBin { true_negative: 1, false_negative: 1 }),
        (2, HistogramBin { true_negative: 1, false_negative: 0 }),
    ]
    .into();
    assert_eq!(disqualifying_histogram(&reports, &labels), expected);
}

#[test]
fn histogram_bins_negatives_by_count() {
    let labels = [
        pair("a", "T", Label::Eligible, LabelSource::Original),
        pair("b", "T", Label::NotEligible, LabelSource::Original),
        pair("c", "T", Label::NotEligible, LabelSource::Original),
        pair("d", "T", Label::Eligible, LabelSource::Original),
        pair("e", "T", Label::NotEligible, LabelSource::Original),
    ];
    let reports = [
        report("a", "T", 1),
        report("b", "T", 1),
        report("c", "T", 4),
        report("d", "T", 0),
        report("e", "T", 4),
        report("unlabeled", "T", 2),
    ];
    let h = disqualifying_histogram(&reports, &labels);
    let expected: BTreeMap<usize, HistogramBin> = [
        (1, HistogramBin { true_negative: 1, false_negative: 1 }),
        (4, HistogramBin { true_negative: 2, false_negative: 0 }),
    ]
    .into();
    assert_eq!(h, expected);
}

// ---- synthetic cohort ----

#[test]
fn packaged_cohort_spec_parses() {
    let spec = CohortSpec::packaged();
    assert_eq!(spec.trials.len(), 6);
    assert!(CohortSpec::parse("version = 1\nbogus = 2").is_err());
}

#[test]
fn synthetic_cohort_is_seed_deterministic() {
    let trials = six_trial_protocols();
    let spec = CohortSpec::packaged();
    let a = generate_synthetic_cohort(&spec, &trials, 5).unwrap();
    let b = generate_synthetic_cohort(&spec, &trials, 5).unwrap();
    assert_eq!(a.pairs, b.pairs);
    assert_eq!(a.documents, b.documents);
    assert_eq!(a.truth, b.truth);
    assert_eq!(a.injected, b.injected);
    assert_eq!(a.pairs.len(), 72);
}

#[test]
fn synthetic_truth_matches_labels() {
    let trials = six_trial_protocols();
    let cohort = generate_synthetic_cohort(&CohortSpec::packaged(), &trials, 11).unwrap();
    for p in &cohort.pairs {
        let trial = trials.iter().find(|t| t.id == p.trial_id).unwrap();
        let truth = &cohort.truth[&crate::triage::PairKey::new(p.trial_id.clone(), p.patient_id.clone())];
        let disq = trial
            .criteria
            .iter()
            .filter(|c| crate::eligibility::effect(c.kind, truth[&c.id]) == crate::eligibility::CriterionEffect::Disqualifying)
            .count();
        match p.label {
            Label::Eligible => assert_eq!(disq, 0),
            Label::NotEligible => assert!((1..=4).contains(&disq)),
        }
        for c in &trial.criteria {
            if let Some(s) = c.resolve_flagged() {
                assert_eq!(truth[&c.id], s);
            }
        }
    }
    // Every document predates the determination date.
    assert!(cohort.documents.iter().all(|d| d.created_date < cohort.pairs[0].determination_date));
}

#[test]
fn zero_rates_inject_nothing_and_heavy_rates_respect_cap() {
    let trials = six_trial_protocols();
    let spec = CohortSpec::packaged().with_rates(ErrorRates::default());
    assert!(generate_synthetic_cohort(&spec, &trials, 1).unwrap().injected.is_empty());

    let heavy = ErrorRates { domain_knowledge: 0.5, logical: 0.5, ..Default::default() };
    let spec = CohortSpec::packaged().with_rates(heavy);
    let cohort = generate_synthetic_cohort(&spec, &trials, 1).unwrap();
    let mut per_pair: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for e in &cohort.injected {
        *per_pair.entry((&e.patient_id, &e.trial_id)).or_default() += 1;
        assert_ne!(e.ai, e.truth);
        assert_ne!(e.ai, CriterionStatus::UnableToDetermine);
    }
    assert_eq!(per_pair.len(), cohort.pairs.len());
    assert!(per_pair.values().all(|&n| n == spec.max_errors_per_pair));
}

#[test]
fn invalid_rates_are_rejected() {
    let trials = six_trial_protocols();
    let over = ErrorRates { domain_knowledge: 0.7, logical: 0.7, ..Default::default() };
    assert!(generate_synthetic_cohort(&CohortSpec::packaged().with_rates(over), &trials, 1).is_err());
    let neg = ErrorRates { logical: -0.1, ..Default::default() };
    assert!(generate_synthetic_cohort(&CohortSpec::packaged().with_rates(neg), &trials, 1).is_err());
    let mut spec = CohortSpec::packaged();
    spec.trials[0].trial_id = "nope".into();
    assert!(generate_synthetic_cohort(&spec, &trials, 1).is_err());
}

// ---- properties ----

fn arb_pairs() -> impl Strategy<Value = Vec<LabeledPair>> {
    prop::collection::btree_map((0u16..400, 0u8..4), any::<bool>(), 0..120).prop_map(|map| {
        map.into_iter()
            .map(|((p, t), e)| {
                pair(
                    &format!("p{p:03}"),
                    &format!("T{t}"),
                    if e { Label::Eligible } else { Label::NotEligible },
                    LabelSource::Original,
                )
            })
            .collect()
    })
}

fn keyed(pairs: &[LabeledPair]) -> BTreeSet<(String, String)> {
    pairs.iter().map(|p| (p.patient_id.clone(), p.trial_id.clone())).collect()
}

proptest! {
    #[test]
    fn split_partitions_input(pairs in arb_pairs(), frac in 0.05f64..0.95, seed in any::<u64>()) {
        let (train, test) = stratified_split(&pairs, frac, seed).unwrap();
        let (tr, te) = (keyed(&train), keyed(&test));
        prop_assert!(tr.is_disjoint(&te));
        prop_assert_eq!(tr.union(&te).cloned().collect::<BTreeSet<_>>(), keyed(&pairs));
        for (key, members) in strata(&pairs) {
            let in_test = test.iter().filter(|p| p.stratum() == key).count();
            prop_assert_eq!(in_test, test_share(members.len(), frac));
        }
        prop_assert_eq!(stratified_split(&pairs, frac, seed).unwrap(), (train, test));
    }

    #[test]
    fn matched_arms_are_balanced(a in arb_pairs(), b in arb_pairs(), seed in any::<u64>()) {
        if let Ok((ma, mb)) = matched_subset(&a, &b, seed) {
            prop_assert_eq!(ma.len(), mb.len());
            let sa: BTreeMap<_, usize> = strata(&ma).into_iter().map(|(k, v)| (k, v.len())).collect();
            let sb: BTreeMap<_, usize> = strata(&mb).into_iter().map(|(k, v)| (k, v.len())).collect();
            prop_assert_eq!(sa, sb);
            prop_assert!(keyed(&ma).is_subset(&keyed(&a)));
            prop_assert!(keyed(&mb).is_subset(&keyed(&b)));
        }
    }

    #[test]
    fn wilson_contains_point_estimate(n in 1u64..5000, k_frac in 0.0f64..=1.0, conf in 0.5f64..0.999) {
        let k = ((n as f64) * k_frac).round() as u64;
        let (lo, hi) = wilson_interval(k, n, conf).unwrap();
        let p = k as f64 / n as f64;
        prop_assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
    }

    #[test]
    fn wilson_is_monotone_in_successes(n in 1u64..400, k in 0u64..400, conf in 0.5f64..0.999) {
        let k = k.min(n - 1);
        let (l0, h0) = wilson_interval(k, n, conf).unwrap();
        let (l1, h1) = wilson_interval(k + 1, n, conf).unwrap();
        prop_assert!(l0 <= l1 && h0 <= h1);
    }

    #[test]
    fn accuracy_is_permutation_invariant(pairs in arb_pairs(), seed in any::<u64>()) {
        let preds: Vec<_> = pairs
            .iter()
            .map(|p| {
                let d = if (p.patient_id.len() + seed as usize).is_multiple_of(3) { Determination::NotEligible } else { Determination::PotentiallyEligible };
                (p.patient_id.as_str(), p.trial_id.as_str(), d)
            })
            .collect();
        let m = confusion(preds.iter().copied(), &pairs).unwrap();
        let mut shuffled = preds.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(m, confusion(shuffled, &pairs).unwrap());
        prop_assert_eq!(m.total() as usize, pairs.len());
        if let Some(acc) = metrics(&m, 0.95).accuracy {
            prop_assert_eq!(acc.point, (m.tp + m.tn) as f64 / m.total() as f64);
        }
    }

    #[test]
    fn wilson_narrows_with_confidence(n in 1u64..500, k_frac in 0.0f64..=1.0) {
        let k = ((n as f64) * k_frac).round() as u64;
        let (l90, h90) = wilson_interval(k, n, 0.90).unwrap();
        let (l99, h99) = wilson_interval(k, n, 0.99).unwrap();
        prop_assert!(l99 <= l90 + 1e-15 && h90 <= h99 + 1e-15);
    }

    #[test]
    fn two_proportion_is_symmetric_and_bounded(
        n1 in 1u64..300, n2 in 1u64..300, f1 in 0.0f64..=1.0, f2 in 0.0f64..=1.0
    ) {
        let k1 = ((n1 as f64) * f1).round() as u64;
        let k2 = ((n2 as f64) * f2).round() as u64;
        let p = two_proportion_test(k1, n1, k2, n2).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(p, two_proportion_test(k2, n2, k1, n1).unwrap());
    }
}
