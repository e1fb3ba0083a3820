use std::sync::Arc;

use chrono::{TimeZone, Utc};
use trialmatch_core::corpus::{Corpus, SpecialtyRouting};
use trialmatch_core::eligibility::Determination;
use trialmatch_core::eval::{
    confusion, disqualifying_histogram, generate_synthetic_cohort, simulate_perfect_review, CohortSpec, ErrorRates,
    Label, SyntheticCohort,
};
use trialmatch_core::fixtures::six_trial_protocols;
use trialmatch_core::gateway::{Gateway, ModelPrice, PriceTable};
use trialmatch_core::index::{ChunkingConfig, HashEmbedder};
use trialmatch_core::kb::{KbSnapshot, KnowledgeBase};
use trialmatch_core::orchestrator::{Orchestrator, OrchestratorConfig};
use trialmatch_core::pipeline::{RunEnv, RunOutput};
use trialmatch_core::protocol::Trial;
use trialmatch_core::tokenize::WhitespaceTokenizer;
use trialmatch_core::triage::{finalize, ReviewQueue, TriagePolicy};

fn run(cohort: &SyntheticCohort, trials: &[Trial], kb: &KbSnapshot) -> RunOutput {
    let gateway = Gateway::new(
        Arc::new(cohort.backend()),
        PriceTable::single("synthetic", ModelPrice::new(1e-6, 4e-6)),
        Arc::new(WhitespaceTokenizer),
    );
    let embedder = HashEmbedder::new(128);
    let config = OrchestratorConfig::new("synthetic");
    let corpus: Corpus = cohort.corpus();
    let routing = SpecialtyRouting::default();
    let env = RunEnv {
        orchestrator: Orchestrator::new(&gateway, &embedder, &config, kb),
        corpus: &corpus,
        trials,
        routing: &routing,
        tokenizer: &WhitespaceTokenizer,
        chunking: ChunkingConfig::default(),
        parallelism: 4,
    };
    env.run(&cohort.pair_requests())
}

fn predictions(out: &RunOutput) -> Vec<(&str, &str, Determination)> {
    out.reports
        .iter()
        .map(|r| (r.report.patient_id.as_str(), r.report.trial_id.as_str(), r.report.determination))
        .collect()
}

#[test]
fn error_free_cohort_is_classified_perfectly() {
    let trials = six_trial_protocols();
    let spec = CohortSpec::packaged().with_rates(ErrorRates::default());
    let cohort = generate_synthetic_cohort(&spec, &trials, 3).unwrap();
    let out = run(&cohort, &trials, &KbSnapshot::empty());
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    let m = confusion(predictions(&out), &cohort.pairs).unwrap();
    assert_eq!((m.fn_, m.fp), (0, 0));
    // Every assessed criterion matches its ground truth.
    for r in &out.reports {
        let truth = &cohort.truth[&trialmatch_core::triage::PairKey::of(&r.report)];
        for a in &r.report.assessments {
            assert_eq!(a.final_status, truth[&a.criterion_id], "{} {}", r.report.patient_id, a.criterion_id);
        }
    }
}

#[test]
fn single_injected_error_perturbs_one_count() {
    let trials = six_trial_protocols();
    let mut spec = CohortSpec::packaged().with_rates(ErrorRates { logical: 1.0, ..Default::default() });
    spec.max_errors_per_pair = 1;
    spec.trials.truncate(1);
    spec.trials[0].eligible = 1;
    spec.trials[0].not_eligible = 0;
    let cohort = generate_synthetic_cohort(&spec, &trials, 9).unwrap();
    assert_eq!(cohort.injected.len(), 1);
    let out = run(&cohort, &trials, &KbSnapshot::empty());
    let r = &out.reports[0].report;
    assert_eq!(r.disqualifying_count, 1);
    let wrong: Vec<_> = r
        .assessments
        .iter()
        .filter(|a| a.final_status != cohort.truth[&trialmatch_core::triage::PairKey::of(r)][&a.criterion_id])
        .map(|a| a.criterion_id.clone())
        .collect();
    assert_eq!(wrong, vec![cohort.injected[0].criterion_id.clone()]);
}

#[test]
fn threshold_two_review_removes_false_negatives() {
    let trials = six_trial_protocols();
    let spec = CohortSpec::packaged().with_rates(ErrorRates {
        domain_knowledge: 0.04,
        logical: 0.03,
        missing_information: 0.02,
        irrelevant_criterion: 0.02,
    });
    let cohort = generate_synthetic_cohort(&spec, &trials, 17).unwrap();
    let out = run(&cohort, &trials, &KbSnapshot::empty());
    assert!(out.failures.is_empty());
    let reports: Vec<_> = out.reports.iter().map(|r| r.report.clone()).collect();

    let hist = disqualifying_histogram(&reports, &cohort.pairs);
    let fn_total: u64 = hist.values().map(|b| b.false_negative).sum();
    assert!(fn_total > 0, "fixture should produce AI false negatives");
    assert!(hist.iter().all(|(&count, b)| b.false_negative == 0 || count <= 2));

    let mut queue = ReviewQueue::build(&reports, TriagePolicy::default());
    let mut kb = KnowledgeBase::in_memory();
    let start = Utc.with_ymd_and_hms(2024, 6, 3, 9, 0, 0).unwrap();
    let summary = simulate_perfect_review(&mut queue, &cohort, &trials, &mut kb, "crc-1", start).unwrap();
    assert_eq!(summary.reviewed, queue.len());
    assert!(queue.len() < reports.len());
    assert!(kb.version() > 0);

    let outcomes = finalize(&reports, &queue).unwrap();
    let reviewed: std::collections::BTreeSet<_> = queue.items().iter().map(|i| i.key()).collect();
    for o in &outcomes {
        let label = cohort
            .pairs
            .iter()
            .find(|p| p.patient_id == o.patient_id && p.trial_id == o.trial_id)
            .unwrap()
            .label;
        let key = trialmatch_core::triage::PairKey::new(o.trial_id.clone(), o.patient_id.clone());
        if reviewed.contains(&key) && label == Label::Eligible {
            assert_eq!(o.final_determination, Determination::PotentiallyEligible);
        }
    }
    let m = confusion(trialmatch_core::eval::outcome_predictions(&outcomes), &cohort.pairs).unwrap();
    assert_eq!(m.fn_, 0);
}
