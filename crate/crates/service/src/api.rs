//! HTTP API under `/api/v1`.
//!
//! Every request needs `Authorization: Bearer <token>`; the token names the
//! reviewer. Every response carries the service config digest and the
//! current knowledge-base version and digest. POST and PUT requests may send
//! an `Idempotency-Key`; a retry with the same key and body replays the
//! first response, and the same key with a different body is rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::{to_bytes, Body as RawBody, Bytes};
use axum::extract::rejection::QueryRejection;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, HeaderName, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Extension, Json, Router};
use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use trialmatch_core::assessment::{EvidenceRef, Seat};
use trialmatch_core::corpus::Corpus;
use trialmatch_core::eligibility::{Determination, EligibilityReport, Tallies};
use trialmatch_core::eval::LabeledPair;
use trialmatch_core::kb::{ErrorMode, EntryScope, KbSnapshot, KnowledgeBase, KnowledgeEntry, NewEntry};
use trialmatch_core::pipeline::PairRequest;
use trialmatch_core::protocol::CriterionStatus;
use trialmatch_core::triage::{OverrideRequest, PairKey, ReviewQueue, TriageError, TriageItem, TriagePolicy};

use crate::engine::Engine;
use crate::evaluation::evaluate_run;
use crate::runner::{execute_run, normalize_pairs};
use crate::workspace::{
    valid_name, JobProgress, JobState, RunJob, RunState, SessionEvent, SessionEventKind, StoredResponse, Workspace,
    WorkspaceError,
};

pub const CONFIG_DIGEST_HEADER: &str = "x-trialmatch-config-digest";
pub const KB_VERSION_HEADER: &str = "x-trialmatch-kb-version";
pub const KB_DIGEST_HEADER: &str = "x-trialmatch-kb-digest";
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

const MAX_BODY: usize = 16 * 1024 * 1024;

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

pub struct AppState {
    pub ws: Workspace,
    pub engine: Arc<Engine>,
    pub corpus: Arc<Corpus>,
    pub kb: Mutex<KnowledgeBase>,
    /// Bearer token to reviewer id.
    pub tokens: BTreeMap<String, String>,
    pub policy: TriagePolicy,
    pub config_digest: String,
    pub clock: Clock,
    /// Serializes queue and session mutations.
    triage_lock: Mutex<()>,
    /// Serializes idempotent requests so a key is never executed twice.
    idempotency_lock: tokio::sync::Mutex<()>,
    active_runs: Mutex<BTreeSet<String>>,
    job_seq: AtomicU64,
}

impl AppState {
    pub fn new(
        ws: Workspace,
        engine: Arc<Engine>,
        corpus: Corpus,
        kb: KnowledgeBase,
        tokens: BTreeMap<String, String>,
        policy: TriagePolicy,
        clock: Clock,
    ) -> Result<Self, WorkspaceError> {
        let jobs = ws.list_jobs()?.len() as u64;
        Ok(AppState {
            config_digest: engine.config_digest(),
            ws,
            engine,
            corpus: Arc::new(corpus),
            kb: Mutex::new(kb),
            tokens,
            policy,
            clock,
            triage_lock: Mutex::new(()),
            idempotency_lock: tokio::sync::Mutex::new(()),
            active_runs: Mutex::new(BTreeSet::new()),
            job_seq: AtomicU64::new(jobs),
        })
    }

    fn kb_snapshot(&self) -> KbSnapshot {
        self.kb.lock().unwrap().snapshot()
    }
}

/// Authenticated reviewer id.
#[derive(Debug, Clone)]
pub struct Reviewer(pub String);

#[derive(Debug)]
pub enum ApiError {
    Unauthorized,
    NotFound(String),
    Conflict(String),
    Unprocessable(String),
    Internal(String),
}

impl ApiError {
    fn parts(&self) -> (StatusCode, &'static str, &str) {
        match self {
            ApiError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthenticated", "missing or unknown bearer token"),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, "not-found", m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, "conflict", m),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid", m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", m),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code, message) = self.parts();
        (status, Json(json!({"error": {"code": code, "message": message}}))).into_response()
    }
}

impl From<WorkspaceError> for ApiError {
    fn from(e: WorkspaceError) -> Self {
        match e {
            WorkspaceError::InvalidName(_) => ApiError::Unprocessable(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<TriageError> for ApiError {
    fn from(e: TriageError) -> Self {
        if e.is_conflict() {
            ApiError::Conflict(e.to_string())
        } else if matches!(e, TriageError::UnknownItem(_)) {
            ApiError::NotFound(e.to_string())
        } else {
            ApiError::Unprocessable(e.to_string())
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// JSON request body whose rejections are reported as 422.
struct Body<T>(T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        let bytes = Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::Unprocessable(e.body_text()))?;
        serde_json::from_slice(&bytes)
            .map(Body)
            .map_err(|e| ApiError::Unprocessable(format!("invalid request body: {e}")))
    }
}

fn json_bytes(status: StatusCode, bytes: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/trials", get(list_trials))
        .route("/trials/{trial_id}", get(get_trial))
        .route("/patients", get(list_patients))
        .route("/runs", get(list_runs).post(submit_run))
        .route("/jobs/{job_id}", get(get_job))
        .route("/runs/{run}", get(get_run))
        .route("/runs/{run}/ledger", get(get_ledger))
        .route("/runs/{run}/reports", get(list_reports))
        .route("/runs/{run}/reports/{trial_id}/{patient_id}", get(get_report))
        .route(
            "/runs/{run}/reports/{trial_id}/{patient_id}/evidence/{criterion_id}",
            get(get_evidence),
        )
        .route("/runs/{run}/triage", get(get_queue))
        .route("/runs/{run}/triage/{trial_id}/{patient_id}", get(get_item))
        .route("/runs/{run}/triage/{trial_id}/{patient_id}/claim", post(claim_item))
        .route("/runs/{run}/triage/{trial_id}/{patient_id}/decision", post(decide_item))
        .route("/runs/{run}/sessions", get(get_sessions))
        .route("/runs/{run}/metrics", get(get_metrics))
        .route("/kb", get(get_kb).post(append_kb))
        .route("/labels/{name}", put(put_labels).get(get_labels))
        .layer(middleware::from_fn_with_state(state.clone(), idempotency))
        .layer(middleware::from_fn_with_state(state.clone(), authenticate));
    Router::new()
        .nest("/api/v1", api)
        .fallback(|| async { ApiError::NotFound("no such endpoint".into()) })
        .layer(middleware::from_fn_with_state(state.clone(), audit_headers))
        .with_state(state)
}

async fn audit_headers(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let mut resp = next.run(req).await;
    let (version, digest) = {
        let kb = state.kb.lock().unwrap().snapshot();
        (kb.version(), kb.digest())
    };
    let h = resp.headers_mut();
    for (name, value) in [
        (CONFIG_DIGEST_HEADER, state.config_digest.clone()),
        (KB_VERSION_HEADER, version.to_string()),
        (KB_DIGEST_HEADER, digest),
    ] {
        h.insert(HeaderName::from_static(name), HeaderValue::from_str(&value).expect("hex and digits"));
    }
    resp
}

async fn authenticate(State(state): State<Arc<AppState>>, mut req: Request, next: Next) -> Response {
    let reviewer = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .and_then(|t| state.tokens.get(t.trim()))
        .cloned();
    match reviewer {
        Some(r) => {
            req.extensions_mut().insert(Reviewer(r));
            next.run(req).await
        }
        None => ApiError::Unauthorized.into_response(),
    }
}

fn hex_digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

async fn idempotency(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if !matches!(*req.method(), Method::POST | Method::PUT) {
        return next.run(req).await;
    }
    let Some(key) = req.headers().get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string) else {
        return next.run(req).await;
    };
    let reviewer = req.extensions().get::<Reviewer>().map(|r| r.0.clone()).unwrap_or_default();
    let (parts, body) = req.into_parts();
    let Ok(body) = to_bytes(body, MAX_BODY).await else {
        return ApiError::Unprocessable("request body too large".into()).into_response();
    };
    let slot = hex_digest(&[
        reviewer.as_bytes(),
        parts.method.as_str().as_bytes(),
        parts.uri.path().as_bytes(),
        key.as_bytes(),
    ]);
    let request_digest = hex_digest(&[&body]);
    let _guard = state.idempotency_lock.lock().await;
    match state.ws.load_idempotent(&slot) {
        Ok(Some(stored)) if stored.request_digest == request_digest => {
            let status = StatusCode::from_u16(stored.status).unwrap_or(StatusCode::OK);
            return json_bytes(status, stored.body.into_bytes());
        }
        Ok(Some(_)) => {
            return ApiError::Unprocessable("idempotency key reused with a different request body".into())
                .into_response()
        }
        Ok(None) => {}
        Err(e) => return ApiError::from(e).into_response(),
    }
    let resp = next.run(Request::from_parts(parts, RawBody::from(body))).await;
    let (parts, body) = resp.into_parts();
    let Ok(bytes) = to_bytes(body, MAX_BODY).await else {
        return ApiError::Internal("response body too large".into()).into_response();
    };
    // Server errors are not remembered so that a retry can succeed.
    if !parts.status.is_server_error() {
        let stored = StoredResponse {
            request_digest,
            status: parts.status.as_u16(),
            body: String::from_utf8_lossy(&bytes).into_owned(),
        };
        if let Err(e) = state.ws.save_idempotent(&slot, &stored) {
            return ApiError::from(e).into_response();
        }
    }
    Response::from_parts(parts, RawBody::from(bytes))
}

// ---- catalog ----

#[derive(Serialize)]
struct TrialSummary<'a> {
    id: &'a str,
    nct_id: &'a str,
    criteria: usize,
    inclusion: usize,
    exclusion: usize,
    vacuous: usize,
    requires_human_review: usize,
}

async fn list_trials(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let trials: Vec<_> = state
        .engine
        .trials
        .iter()
        .map(|t| {
            let c = t.counts();
            TrialSummary {
                id: &t.id,
                nct_id: &t.nct_id,
                criteria: t.criteria.len(),
                inclusion: c.inclusion,
                exclusion: c.exclusion,
                vacuous: c.vacuous,
                requires_human_review: c.requires_human_review,
            }
        })
        .collect();
    Json(json!({ "trials": trials }))
}

async fn get_trial(State(state): State<Arc<AppState>>, Path(trial_id): Path<String>) -> ApiResult<Response> {
    let t = state
        .engine
        .trial(&trial_id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown trial `{trial_id}`")))?;
    Ok(Json(t).into_response())
}

async fn list_patients(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let patients: Vec<_> = state
        .corpus
        .sizes()
        .into_iter()
        .map(|(id, n)| json!({"patient_id": id, "documents": n}))
        .collect();
    Json(json!({ "patients": patients }))
}

// ---- runs ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSubmission {
    run: String,
    pairs: Vec<PairRequest>,
    #[serde(default = "yes")]
    use_kb: bool,
}

fn yes() -> bool {
    true
}

fn validate_pairs(state: &AppState, pairs: &[PairRequest]) -> ApiResult<()> {
    if pairs.is_empty() {
        return Err(ApiError::Unprocessable("`pairs` is empty".into()));
    }
    for p in pairs {
        if state.engine.trial(&p.trial_id).is_none() {
            return Err(ApiError::Unprocessable(format!("unknown trial `{}`", p.trial_id)));
        }
        if state.corpus.documents(&p.patient_id).is_none() {
            return Err(ApiError::Unprocessable(format!("unknown patient `{}`", p.patient_id)));
        }
    }
    Ok(())
}

async fn submit_run(State(state): State<Arc<AppState>>, Body(sub): Body<RunSubmission>) -> ApiResult<Response> {
    valid_name(&sub.run)?;
    validate_pairs(&state, &sub.pairs)?;
    if !state.active_runs.lock().unwrap().insert(sub.run.clone()) {
        return Err(ApiError::Conflict(format!("run `{}` is already executing", sub.run)));
    }
    let kb = if sub.use_kb { state.kb_snapshot() } else { KbSnapshot::empty() };
    let pairs = normalize_pairs(&sub.pairs);
    let total = pairs.len();
    let n = state.job_seq.fetch_add(1, Ordering::SeqCst) + 1;
    let job = RunJob {
        job_id: format!("job-{n:06}"),
        run: sub.run.clone(),
        pairs,
        use_kb: sub.use_kb,
        config_digest: state.config_digest.clone(),
        kb_version: kb.version(),
        state: JobState::Queued,
        progress: JobProgress {
            total,
            ..Default::default()
        },
        error: None,
    };
    if let Err(e) = state.ws.save_job(&job) {
        state.active_runs.lock().unwrap().remove(&sub.run);
        return Err(e.into());
    }
    let worker = state.clone();
    let mut running = job.clone();
    tokio::task::spawn_blocking(move || {
        running.state = JobState::Running;
        let _ = worker.ws.save_job(&running);
        let run = running.run.clone();
        let pairs = running.pairs.clone();
        let mut progress = running.progress;
        let result = execute_run(&worker.ws, &worker.engine, &worker.corpus, &kb, &run, &pairs, &mut |p| {
            progress = p;
            let mut snapshot = running.clone();
            snapshot.progress = p;
            let _ = worker.ws.save_job(&snapshot);
        });
        running.progress = progress;
        match result {
            Ok(_) => running.state = JobState::Done,
            Err(e) => {
                running.state = JobState::Failed;
                running.error = Some(e.to_string());
            }
        }
        let _ = worker.ws.save_job(&running);
        worker.active_runs.lock().unwrap().remove(&run);
    });
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn get_job(State(state): State<Arc<AppState>>, Path(job_id): Path<String>) -> ApiResult<Response> {
    let job = state
        .ws
        .load_job(&job_id)?
        .ok_or_else(|| ApiError::NotFound(format!("unknown job `{job_id}`")))?;
    Ok(Json(job).into_response())
}

async fn list_runs(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    let mut runs = Vec::new();
    for name in state.ws.list_runs()? {
        if let Some(m) = state.ws.load_manifest(&name)? {
            runs.push(json!({
                "name": m.name,
                "state": m.state,
                "mode": m.mode,
                "pairs": m.pairs.len(),
                "completed": m.completed,
                "failures": m.failures.len(),
                "kb_version": m.kb_version,
                "config_digest": m.config_digest,
            }));
        }
    }
    Ok(Json(json!({ "runs": runs })).into_response())
}

fn manifest_or_404(state: &AppState, run: &str) -> ApiResult<crate::workspace::RunManifest> {
    state
        .ws
        .load_manifest(run)?
        .ok_or_else(|| ApiError::NotFound(format!("unknown run `{run}`")))
}

async fn get_run(State(state): State<Arc<AppState>>, Path(run): Path<String>) -> ApiResult<Response> {
    Ok(Json(manifest_or_404(&state, &run)?).into_response())
}

async fn get_ledger(State(state): State<Arc<AppState>>, Path(run): Path<String>) -> ApiResult<Response> {
    manifest_or_404(&state, &run)?;
    let bytes = state
        .ws
        .ledger_bytes(&run)?
        .ok_or_else(|| ApiError::NotFound(format!("run `{run}` has no ledger yet")))?;
    Ok(json_bytes(StatusCode::OK, bytes))
}

#[derive(Serialize)]
struct ReportSummary {
    trial_id: String,
    patient_id: String,
    determination: Determination,
    disqualifying_count: usize,
    tallies: Tallies,
}

async fn list_reports(State(state): State<Arc<AppState>>, Path(run): Path<String>) -> ApiResult<Response> {
    manifest_or_404(&state, &run)?;
    let reports: Vec<_> = state
        .ws
        .load_reports(&run)?
        .into_iter()
        .map(|d| ReportSummary {
            trial_id: d.report.trial_id,
            patient_id: d.report.patient_id,
            determination: d.report.determination,
            disqualifying_count: d.report.disqualifying_count,
            tallies: d.report.tallies,
        })
        .collect();
    Ok(Json(json!({ "reports": reports })).into_response())
}

fn report_bytes(state: &AppState, run: &str, trial_id: &str, patient_id: &str) -> ApiResult<Vec<u8>> {
    state
        .ws
        .report_bytes(run, trial_id, patient_id)?
        .ok_or_else(|| ApiError::NotFound(format!("no report for ({patient_id}, {trial_id}) in run `{run}`")))
}

async fn get_report(
    State(state): State<Arc<AppState>>,
    Path((run, trial_id, patient_id)): Path<(String, String, String)>,
) -> ApiResult<Response> {
    Ok(json_bytes(StatusCode::OK, report_bytes(&state, &run, &trial_id, &patient_id)?))
}

#[derive(Serialize)]
struct OpinionEvidence {
    seat: Seat,
    status: CriterionStatus,
    explanation: String,
    evidence: Vec<EvidenceRef>,
}

async fn get_evidence(
    State(state): State<Arc<AppState>>,
    Path((run, trial_id, patient_id, criterion_id)): Path<(String, String, String, String)>,
) -> ApiResult<Response> {
    let bytes = report_bytes(&state, &run, &trial_id, &patient_id)?;
    let doc = trialmatch_core::report::ReportDocument::from_slice(&bytes)
        .map_err(|e| ApiError::Internal(format!("stored report is unreadable: {e}")))?;
    let a = doc
        .report
        .assessments
        .into_iter()
        .find(|a| a.criterion_id == criterion_id)
        .ok_or_else(|| ApiError::NotFound(format!("no criterion `{criterion_id}` in trial `{trial_id}`")))?;
    let opinions: Vec<_> = a
        .opinions
        .into_iter()
        .map(|o| OpinionEvidence {
            seat: o.seat,
            status: o.status,
            explanation: o.explanation,
            evidence: o.evidence,
        })
        .collect();
    Ok(Json(json!({
        "criterion_id": a.criterion_id,
        "final_status": a.final_status,
        "short_circuited": a.short_circuited,
        "opinions": opinions,
    }))
    .into_response())
}

// ---- triage ----

/// Loads the run's queue, building and persisting it on first use.
fn queue_for(state: &AppState, run: &str) -> ApiResult<ReviewQueue> {
    if let Some(q) = state.ws.load_queue(run)? {
        return Ok(q);
    }
    let m = manifest_or_404(state, run)?;
    if m.state != RunState::Done {
        return Err(ApiError::Conflict(format!("run `{run}` is still executing")));
    }
    let reports: Vec<EligibilityReport> = state.ws.load_reports(run)?.into_iter().map(|d| d.report).collect();
    let q = ReviewQueue::build(&reports, state.policy);
    state.ws.save_queue(run, &q)?;
    Ok(q)
}

async fn get_queue(State(state): State<Arc<AppState>>, Path(run): Path<String>) -> ApiResult<Response> {
    let _g = state.triage_lock.lock().unwrap();
    let q = queue_for(&state, &run)?;
    Ok(Json(q).into_response())
}

async fn get_item(
    State(state): State<Arc<AppState>>,
    Path((run, trial_id, patient_id)): Path<(String, String, String)>,
) -> ApiResult<Response> {
    let _g = state.triage_lock.lock().unwrap();
    let q = queue_for(&state, &run)?;
    let key = PairKey::new(trial_id, patient_id);
    let item = q
        .get(&key)
        .ok_or_else(|| ApiError::NotFound(TriageError::UnknownItem(key.clone()).to_string()))?;
    Ok(Json(item).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClaimBody {
    version: u64,
}

fn session(state: &AppState, run: &str, reviewer: &str, item: &TriageItem, event: SessionEventKind, at: DateTime<Utc>) -> ApiResult<()> {
    state.ws.append_session(
        run,
        SessionEvent {
            reviewer: reviewer.to_string(),
            trial_id: item.trial_id.clone(),
            patient_id: item.patient_id.clone(),
            event,
            at,
        },
    )?;
    Ok(())
}

async fn claim_item(
    State(state): State<Arc<AppState>>,
    Extension(Reviewer(reviewer)): Extension<Reviewer>,
    Path((run, trial_id, patient_id)): Path<(String, String, String)>,
    Body(body): Body<ClaimBody>,
) -> ApiResult<Response> {
    let _g = state.triage_lock.lock().unwrap();
    let mut q = queue_for(&state, &run)?;
    let key = PairKey::new(trial_id, patient_id);
    let at = (state.clock)();
    let was_claimed = q.get(&key).is_some_and(|i| i.claimed_by.is_some());
    let item = q.claim(&key, &reviewer, body.version, at)?.clone();
    state.ws.save_queue(&run, &q)?;
    if !was_claimed {
        session(&state, &run, &reviewer, &item, SessionEventKind::Opened, at)?;
    }
    Ok(Json(item).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum DecisionKind {
    Confirm,
    Override,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionBody {
    version: u64,
    decision: DecisionKind,
    #[serde(default)]
    overrides: Vec<OverrideRequest>,
}

async fn decide_item(
    State(state): State<Arc<AppState>>,
    Extension(Reviewer(reviewer)): Extension<Reviewer>,
    Path((run, trial_id, patient_id)): Path<(String, String, String)>,
    Body(body): Body<DecisionBody>,
) -> ApiResult<Response> {
    let _g = state.triage_lock.lock().unwrap();
    let mut q = queue_for(&state, &run)?;
    let key = PairKey::new(trial_id.clone(), patient_id);
    let at = (state.clock)();
    let item = match body.decision {
        DecisionKind::Confirm => {
            if !body.overrides.is_empty() {
                return Err(ApiError::Unprocessable("a confirmation carries no overrides".into()));
            }
            q.confirm(&key, &reviewer, body.version, at)?.clone()
        }
        DecisionKind::Override => {
            if body.overrides.is_empty() {
                return Err(TriageError::EmptyOverride.into());
            }
            if let Some(o) = body
                .overrides
                .iter()
                .find(|o| o.note.as_deref().is_none_or(|n| n.trim().is_empty()))
            {
                return Err(ApiError::Unprocessable(format!(
                    "override of `{}` needs a feedback note",
                    o.criterion_id
                )));
            }
            let trial = state
                .engine
                .trial(&trial_id)
                .ok_or_else(|| ApiError::NotFound(format!("unknown trial `{trial_id}`")))?;
            let mut kb = state.kb.lock().unwrap();
            q.override_item(&key, &reviewer, body.version, &body.overrides, trial, &mut kb, at)?
                .clone()
        }
    };
    state.ws.save_queue(&run, &q)?;
    session(&state, &run, &reviewer, &item, SessionEventKind::Decided, at)?;
    Ok(Json(item).into_response())
}

async fn get_sessions(State(state): State<Arc<AppState>>, Path(run): Path<String>) -> ApiResult<Response> {
    manifest_or_404(&state, &run)?;
    Ok(Json(json!({ "events": state.ws.load_sessions(&run)? })).into_response())
}

// ---- knowledge base ----

async fn get_kb(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let kb = state.kb_snapshot();
    Json(json!({
        "version": kb.version(),
        "digest": kb.digest(),
        "entries": kb.entries(),
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct KbSubmission {
    text: String,
    #[serde(default = "other_mode")]
    error_mode: ErrorMode,
    #[serde(default)]
    scope: Option<EntryScope>,
}

fn other_mode() -> ErrorMode {
    ErrorMode::Other
}

async fn append_kb(
    State(state): State<Arc<AppState>>,
    Extension(Reviewer(reviewer)): Extension<Reviewer>,
    Body(body): Body<KbSubmission>,
) -> ApiResult<Response> {
    let at = (state.clock)();
    let entry: KnowledgeEntry = state
        .kb
        .lock()
        .unwrap()
        .append(
            NewEntry {
                text: body.text,
                error_mode: body.error_mode,
                scope: body.scope,
                author: reviewer,
            },
            at,
        )
        .map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    Ok((StatusCode::CREATED, Json(entry)).into_response())
}

// ---- labels and metrics ----

async fn put_labels(
    State(state): State<Arc<AppState>>,
    Path(name): Path<String>,
    Body(labels): Body<Vec<LabeledPair>>,
) -> ApiResult<Response> {
    let mut seen = BTreeSet::new();
    for l in &labels {
        if !seen.insert((&l.patient_id, &l.trial_id)) {
            return Err(ApiError::Unprocessable(format!(
                "({}, {}) is labeled more than once",
                l.patient_id, l.trial_id
            )));
        }
    }
    state.ws.save_labels(&name, &labels)?;
    Ok(Json(json!({"name": name, "pairs": labels.len()})).into_response())
}

async fn get_labels(State(state): State<Arc<AppState>>, Path(name): Path<String>) -> ApiResult<Response> {
    let labels = state
        .ws
        .load_labels(&name)?
        .ok_or_else(|| ApiError::NotFound(format!("unknown label set `{name}`")))?;
    Ok(Json(labels).into_response())
}

#[derive(Debug, Deserialize)]
struct MetricsQuery {
    labels: String,
    #[serde(default = "default_confidence")]
    confidence: f64,
}

fn default_confidence() -> f64 {
    0.95
}

async fn get_metrics(
    State(state): State<Arc<AppState>>,
    Path(run): Path<String>,
    query: Result<Query<MetricsQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = query.map_err(|e| ApiError::Unprocessable(e.body_text()))?;
    let m = manifest_or_404(&state, &run)?;
    if m.state != RunState::Done {
        return Err(ApiError::Conflict(format!("run `{run}` is still executing")));
    }
    let labels = state
        .ws
        .load_labels(&q.labels)?
        .ok_or_else(|| ApiError::NotFound(format!("unknown label set `{}`", q.labels)))?;
    let reports: Vec<EligibilityReport> = state.ws.load_reports(&run)?.into_iter().map(|d| d.report).collect();
    let queue = {
        let _g = state.triage_lock.lock().unwrap();
        state.ws.load_queue(&run)?
    };
    let metrics = evaluate_run(&reports, queue.as_ref(), &labels, q.confidence)
        .map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    Ok(Json(json!({"run": run, "labels": q.labels, "metrics": metrics})).into_response())
}
