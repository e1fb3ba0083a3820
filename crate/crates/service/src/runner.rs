//! Resumable batch runs.
//!
//! Reports are persisted as each batch completes. Re-running a run name
//! skips pairs whose report is already stored, so an interrupted run picks
//! up where it stopped. A run's configuration and knowledge-base digests are
//! fixed by its first invocation; resuming under different settings is
//! refused rather than mixing reports.

use thiserror::Error;
use trialmatch_core::corpus::Corpus;
use trialmatch_core::gateway::CostLedger;
use trialmatch_core::kb::KbSnapshot;
use trialmatch_core::pipeline::{PairFailure, PairRequest};
use trialmatch_core::report::{pair_key, LedgerExcerpt};

use crate::engine::Engine;
use crate::workspace::{valid_name, JobProgress, RunManifest, RunState, Workspace, WorkspaceError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error("run `{run}` was started with {what} {stored}; the current one is {current}")]
    Mismatch {
        run: String,
        what: &'static str,
        stored: String,
        current: String,
    },
    #[error("no pairs to assess")]
    Empty,
}

pub fn normalize_pairs(pairs: &[PairRequest]) -> Vec<PairRequest> {
    let mut v = pairs.to_vec();
    v.sort_by(|a, b| (&a.trial_id, &a.patient_id).cmp(&(&b.trial_id, &b.patient_id)));
    v.dedup_by(|a, b| a.trial_id == b.trial_id && a.patient_id == b.patient_id);
    v
}

/// Assesses `pairs` under run `name`, persisting as it goes. `progress` is
/// called after every batch.
pub fn execute_run(
    ws: &Workspace,
    engine: &Engine,
    corpus: &Corpus,
    kb: &KbSnapshot,
    name: &str,
    pairs: &[PairRequest],
    progress: &mut dyn FnMut(JobProgress),
) -> Result<RunManifest, RunError> {
    valid_name(name)?;
    let pairs = normalize_pairs(pairs);
    if pairs.is_empty() {
        return Err(RunError::Empty);
    }
    let env = engine.run_env(corpus, kb);
    let config_digest = env.config_digest();
    let mut manifest = match ws.load_manifest(name)? {
        Some(m) => {
            for (what, stored, current) in [
                ("config digest", &m.config_digest, &config_digest),
                ("knowledge-base digest", &m.kb_digest, &kb.digest()),
            ] {
                if stored != current {
                    return Err(RunError::Mismatch {
                        run: name.into(),
                        what,
                        stored: stored.clone(),
                        current: current.clone(),
                    });
                }
            }
            let mut merged = m.pairs.clone();
            merged.extend(pairs.iter().cloned());
            RunManifest {
                pairs: normalize_pairs(&merged),
                state: RunState::Running,
                failures: Vec::new(),
                ..m
            }
        }
        None => RunManifest {
            name: name.into(),
            config_digest: config_digest.clone(),
            kb_version: kb.version(),
            kb_digest: kb.digest(),
            mode: engine.orchestrator.mode,
            backend_id: engine.gateway.backend_id().to_string(),
            state: RunState::Running,
            pairs: pairs.clone(),
            completed: 0,
            failures: Vec::new(),
        },
    };
    ws.save_manifest(&manifest)?;

    let done: std::collections::BTreeSet<String> = ws.report_keys(name)?.into_iter().collect();
    let todo: Vec<PairRequest> = pairs
        .iter()
        .filter(|p| !done.contains(&pair_key(&p.trial_id, &p.patient_id)))
        .cloned()
        .collect();
    let mut state = JobProgress {
        total: pairs.len(),
        completed: pairs.len() - todo.len(),
        failed: 0,
    };
    progress(state);
    let mut failures: Vec<PairFailure> = Vec::new();
    for batch in todo.chunks(engine.parallelism * 2) {
        let out = env.run(batch);
        for r in &out.reports {
            ws.save_report(name, r)?;
        }
        state.completed += out.reports.len();
        state.failed += out.failures.len();
        failures.extend(out.failures);
        progress(state);
    }

    // The run ledger is rebuilt from every stored report, in report order.
    let reports = ws.load_reports(name)?;
    let mut ledger = CostLedger::new();
    for r in &reports {
        for e in &r.ledger.entries {
            ledger.push(e.clone());
        }
    }
    ws.save_ledger(name, &LedgerExcerpt::from(&ledger))?;
    manifest.completed = reports.len();
    manifest.failures = failures;
    manifest.state = RunState::Done;
    ws.save_manifest(&manifest)?;
    Ok(manifest)
}
