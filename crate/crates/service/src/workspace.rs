//! Typed persistence on top of a [`DocumentStore`].
//!
//! Layout (collection / key):
//!
//! ```text
//! corpus/documents.ndjson
//! labels/<name>.json
//! run-index/<run>            (empty marker)
//! runs/<run>/manifest.json
//! runs/<run>/ledger.json
//! runs/<run>/triage.json
//! runs/<run>/sessions.json
//! runs/<run>/reports/<trial>__<patient>.json
//! jobs/<job id>.json
//! idempotency/<digest>.json
//! index/<patient>/<specialty>.tmvs
//! ```

use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use trialmatch_core::corpus::{ingest, to_ndjson, Corpus, CorpusError};
use trialmatch_core::eval::LabeledPair;
use trialmatch_core::orchestrator::Mode;
use trialmatch_core::pipeline::{PairFailure, PairRequest};
use trialmatch_core::report::{pair_key, LedgerExcerpt, ReportDocument};
use trialmatch_core::triage::ReviewQueue;

use crate::store::{DocumentStore, StoreError};

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{collection}/{key}: {message}")]
    Corrupt {
        collection: String,
        key: String,
        message: String,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid name `{0}`: use letters, digits, `.`, `_` and `-`")]
    InvalidName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunState {
    Running,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_digest: String,
    pub kb_version: u64,
    pub kb_digest: String,
    pub mode: Mode,
    pub backend_id: String,
    pub state: RunState,
    /// Every requested pair, sorted by (trial, patient) and deduplicated.
    pub pairs: Vec<PairRequest>,
    pub completed: usize,
    pub failures: Vec<PairFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionEventKind {
    Opened,
    Decided,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub reviewer: String,
    pub trial_id: String,
    pub patient_id: String,
    pub event: SessionEventKind,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobProgress {
    pub total: usize,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunJob {
    pub job_id: String,
    pub run: String,
    pub pairs: Vec<PairRequest>,
    pub use_kb: bool,
    pub config_digest: String,
    pub kb_version: u64,
    pub state: JobState,
    pub progress: JobProgress,
    pub error: Option<String>,
}

/// A response remembered under an idempotency key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredResponse {
    pub request_digest: String,
    pub status: u16,
    pub body: String,
}

pub fn valid_name(name: &str) -> Result<(), WorkspaceError> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && !name.ends_with(".tmp")
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(())
    } else {
        Err(WorkspaceError::InvalidName(name.to_string()))
    }
}

#[derive(Clone)]
pub struct Workspace {
    store: Arc<dyn DocumentStore>,
}

impl std::fmt::Debug for Workspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Workspace")
    }
}

fn run_collection(run: &str) -> Result<String, WorkspaceError> {
    valid_name(run)?;
    Ok(format!("runs/{run}"))
}

impl Workspace {
    pub fn new(store: Arc<dyn DocumentStore>) -> Self {
        Workspace { store }
    }

    pub fn store(&self) -> &dyn DocumentStore {
        self.store.as_ref()
    }

    fn get_json<T: DeserializeOwned>(&self, collection: &str, key: &str) -> Result<Option<T>, WorkspaceError> {
        let Some(bytes) = self.store.get(collection, key)? else {
            return Ok(None);
        };
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| WorkspaceError::Corrupt {
                collection: collection.into(),
                key: key.into(),
                message: e.to_string(),
            })
    }

    fn put_json<T: Serialize>(&self, collection: &str, key: &str, value: &T) -> Result<(), WorkspaceError> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("workspace values serialize");
        bytes.push(b'\n');
        Ok(self.store.put(collection, key, &bytes)?)
    }

    pub fn save_corpus(&self, corpus: &Corpus) -> Result<(), WorkspaceError> {
        Ok(self
            .store
            .put("corpus", "documents.ndjson", to_ndjson(corpus.iter()).as_bytes())?)
    }

    pub fn load_corpus(&self) -> Result<Option<Corpus>, WorkspaceError> {
        match self.store.get("corpus", "documents.ndjson")? {
            Some(bytes) => Ok(Some(ingest(bytes.as_slice())?)),
            None => Ok(None),
        }
    }

    pub fn save_labels(&self, name: &str, labels: &[LabeledPair]) -> Result<(), WorkspaceError> {
        valid_name(name)?;
        self.put_json("labels", &format!("{name}.json"), &labels)
    }

    pub fn load_labels(&self, name: &str) -> Result<Option<Vec<LabeledPair>>, WorkspaceError> {
        valid_name(name)?;
        self.get_json("labels", &format!("{name}.json"))
    }

    pub fn list_runs(&self) -> Result<Vec<String>, WorkspaceError> {
        // The store lists keys, not sub-collections, so run names are kept
        // in an index collection of empty markers.
        Ok(self.store.list("run-index")?)
    }

    pub fn save_manifest(&self, manifest: &RunManifest) -> Result<(), WorkspaceError> {
        let c = run_collection(&manifest.name)?;
        if self.store.get("run-index", &manifest.name)?.is_none() {
            self.store.put("run-index", &manifest.name, b"")?;
        }
        self.put_json(&c, "manifest.json", manifest)
    }

    pub fn load_manifest(&self, run: &str) -> Result<Option<RunManifest>, WorkspaceError> {
        self.get_json(&run_collection(run)?, "manifest.json")
    }

    pub fn save_ledger(&self, run: &str, ledger: &LedgerExcerpt) -> Result<(), WorkspaceError> {
        self.put_json(&run_collection(run)?, "ledger.json", ledger)
    }

    pub fn ledger_bytes(&self, run: &str) -> Result<Option<Vec<u8>>, WorkspaceError> {
        Ok(self.store.get(&run_collection(run)?, "ledger.json")?)
    }

    pub fn save_report(&self, run: &str, report: &ReportDocument) -> Result<(), WorkspaceError> {
        let c = format!("{}/reports", run_collection(run)?);
        Ok(self.store.put(&c, &format!("{}.json", report.key()), &report.to_bytes())?)
    }

    /// The persisted bytes, exactly as written.
    pub fn report_bytes(&self, run: &str, trial_id: &str, patient_id: &str) -> Result<Option<Vec<u8>>, WorkspaceError> {
        let c = format!("{}/reports", run_collection(run)?);
        Ok(self.store.get(&c, &format!("{}.json", pair_key(trial_id, patient_id)))?)
    }

    pub fn report_keys(&self, run: &str) -> Result<Vec<String>, WorkspaceError> {
        let c = format!("{}/reports", run_collection(run)?);
        Ok(self
            .store
            .list(&c)?
            .into_iter()
            .filter_map(|k| k.strip_suffix(".json").map(str::to_string))
            .collect())
    }

    /// Every report of the run, sorted by (trial, patient).
    pub fn load_reports(&self, run: &str) -> Result<Vec<ReportDocument>, WorkspaceError> {
        let c = format!("{}/reports", run_collection(run)?);
        let mut out = Vec::new();
        for key in self.store.list(&c)? {
            let bytes = self.store.get(&c, &key)?.unwrap_or_default();
            out.push(ReportDocument::from_slice(&bytes).map_err(|e| WorkspaceError::Corrupt {
                collection: c.clone(),
                key,
                message: e.to_string(),
            })?);
        }
        out.sort_by(|a, b| (&a.report.trial_id, &a.report.patient_id).cmp(&(&b.report.trial_id, &b.report.patient_id)));
        Ok(out)
    }

    pub fn save_queue(&self, run: &str, queue: &ReviewQueue) -> Result<(), WorkspaceError> {
        self.put_json(&run_collection(run)?, "triage.json", queue)
    }

    pub fn load_queue(&self, run: &str) -> Result<Option<ReviewQueue>, WorkspaceError> {
        self.get_json(&run_collection(run)?, "triage.json")
    }

    pub fn load_sessions(&self, run: &str) -> Result<Vec<SessionEvent>, WorkspaceError> {
        Ok(self.get_json(&run_collection(run)?, "sessions.json")?.unwrap_or_default())
    }

    pub fn append_session(&self, run: &str, event: SessionEvent) -> Result<(), WorkspaceError> {
        let mut events = self.load_sessions(run)?;
        events.push(event);
        self.put_json(&run_collection(run)?, "sessions.json", &events)
    }

    pub fn save_job(&self, job: &RunJob) -> Result<(), WorkspaceError> {
        valid_name(&job.job_id)?;
        self.put_json("jobs", &format!("{}.json", job.job_id), job)
    }

    pub fn load_job(&self, job_id: &str) -> Result<Option<RunJob>, WorkspaceError> {
        if valid_name(job_id).is_err() {
            return Ok(None);
        }
        self.get_json("jobs", &format!("{job_id}.json"))
    }

    pub fn list_jobs(&self) -> Result<Vec<String>, WorkspaceError> {
        Ok(self
            .store
            .list("jobs")?
            .into_iter()
            .filter_map(|k| k.strip_suffix(".json").map(str::to_string))
            .collect())
    }

    pub fn load_idempotent(&self, key_digest: &str) -> Result<Option<StoredResponse>, WorkspaceError> {
        self.get_json("idempotency", &format!("{key_digest}.json"))
    }

    pub fn save_idempotent(&self, key_digest: &str, response: &StoredResponse) -> Result<(), WorkspaceError> {
        self.put_json("idempotency", &format!("{key_digest}.json"), response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::MemoryStore;

    fn ws() -> Workspace {
        Workspace::new(Arc::new(MemoryStore::new()))
    }

    fn manifest(name: &str) -> RunManifest {
        RunManifest {
            name: name.into(),
            config_digest: "c".into(),
            kb_version: 0,
            kb_digest: "k".into(),
            mode: Mode::MultiExpert,
            backend_id: "scripted".into(),
            state: RunState::Done,
            pairs: vec![],
            completed: 0,
            failures: vec![],
        }
    }

    #[test]
    fn runs_are_discovered_by_manifest() {
        let w = ws();
        w.save_manifest(&manifest("b")).unwrap();
        w.save_manifest(&manifest("a")).unwrap();
        w.save_manifest(&manifest("a")).unwrap();
        assert_eq!(w.list_runs().unwrap(), ["a", "b"]);
        assert_eq!(w.load_manifest("a").unwrap().unwrap(), manifest("a"));
        assert!(w.load_manifest("zzz").unwrap().is_none());
    }

    #[test]
    fn run_names_are_validated() {
        let w = ws();
        for bad in ["", "..", "a/b", "a b", "x.tmp"] {
            assert!(matches!(w.save_manifest(&manifest(bad)), Err(WorkspaceError::InvalidName(_))), "{bad}");
        }
    }

    #[test]
    fn sessions_append_in_order() {
        let w = ws();
        let at = Utc::now();
        for event in [SessionEventKind::Opened, SessionEventKind::Decided] {
            w.append_session(
                "r",
                SessionEvent {
                    reviewer: "crc".into(),
                    trial_id: "t".into(),
                    patient_id: "p".into(),
                    event,
                    at,
                },
            )
            .unwrap();
        }
        let events: Vec<_> = w.load_sessions("r").unwrap().into_iter().map(|e| e.event).collect();
        assert_eq!(events, [SessionEventKind::Opened, SessionEventKind::Decided]);
    }
}
