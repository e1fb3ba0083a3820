#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{HeaderMap, Method, Request, StatusCode};
use axum::Router;
use chrono::{DateTime, TimeZone, Utc};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;
use trialmatch_core::eval::{generate_synthetic_cohort, CohortSpec, SyntheticCohort};
use trialmatch_core::fixtures::six_trial_protocols;
use trialmatch_core::kb::KnowledgeBase;
use trialmatch_core::triage::TriagePolicy;
use trialmatch_service::api::{router, AppState};
use trialmatch_service::config::ServiceConfig;
use trialmatch_service::engine::{Engine, EngineOverrides};
use trialmatch_service::store::MemoryStore;
use trialmatch_service::workspace::Workspace;

pub const ALICE: &str = "tok-alice";
pub const BOB: &str = "tok-bob";

/// Two small trials; every not-eligible patient has one or two true
/// disqualifying criteria, so all of them are queued at threshold 2.
pub const SMALL_SPEC: &str = r#"
version = 1
determination_date = "2024-06-01"
max_errors_per_pair = 1
max_true_disqualifying = 2

[error_rates]
domain_knowledge = 0.03

[[trials]]
trial_id = "19-410"
eligible = 2
not_eligible = 3

[[trials]]
trial_id = "22-259"
eligible = 2
not_eligible = 3
"#;

pub fn small_cohort(seed: u64) -> SyntheticCohort {
    let spec = CohortSpec::parse(SMALL_SPEC).unwrap();
    generate_synthetic_cohort(&spec, &six_trial_protocols(), seed).unwrap()
}

pub struct Harness {
    pub app: Router,
    pub state: Arc<AppState>,
    pub cohort: SyntheticCohort,
}

/// Ticks 30 seconds per reading.
pub fn stepping_clock(start: DateTime<Utc>) -> Arc<dyn Fn() -> DateTime<Utc> + Send + Sync> {
    let t = Arc::new(AtomicI64::new(start.timestamp()));
    Arc::new(move || Utc.timestamp_opt(t.fetch_add(30, Ordering::SeqCst), 0).unwrap())
}

pub fn harness(seed: u64) -> Harness {
    let cohort = small_cohort(seed);
    let engine = Engine::with_backend(
        &ServiceConfig::default(),
        &EngineOverrides::default(),
        Arc::new(cohort.backend()),
    )
    .unwrap();
    let tokens = BTreeMap::from([(ALICE.to_string(), "alice".to_string()), (BOB.to_string(), "bob".to_string())]);
    let state = Arc::new(
        AppState::new(
            Workspace::new(Arc::new(MemoryStore::new())),
            Arc::new(engine),
            cohort.corpus(),
            KnowledgeBase::in_memory(),
            tokens,
            TriagePolicy::default(),
            stepping_clock(Utc.with_ymd_and_hms(2024, 7, 1, 9, 0, 0).unwrap()),
        )
        .unwrap(),
    );
    Harness {
        app: router(state.clone()),
        state,
        cohort,
    }
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }

    pub fn header(&self, name: &str) -> &str {
        self.headers.get(name).unwrap().to_str().unwrap()
    }
}

impl Harness {
    pub async fn call(
        &self,
        method: Method,
        uri: &str,
        token: Option<&str>,
        body: Option<&Value>,
        idempotency_key: Option<&str>,
    ) -> Reply {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        if let Some(k) = idempotency_key {
            req = req.header("idempotency-key", k);
        }
        let req = match body {
            Some(b) => req
                .header("content-type", "application/json")
                .body(Body::from(serde_json::to_vec(b).unwrap())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let headers = resp.headers().clone();
        let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        Reply { status, headers, body }
    }

    pub async fn get(&self, uri: &str) -> Reply {
        self.call(Method::GET, uri, Some(ALICE), None, None).await
    }

    pub async fn post(&self, uri: &str, token: &str, body: &Value) -> Reply {
        self.call(Method::POST, uri, Some(token), Some(body), None).await
    }

    /// Submits a run of every cohort pair and polls the job until it settles.
    pub async fn run_all(&self, run: &str) -> Value {
        let pairs = serde_json::to_value(self.cohort.pair_requests()).unwrap();
        let r = self
            .post("/api/v1/runs", ALICE, &serde_json::json!({"run": run, "pairs": pairs}))
            .await;
        assert_eq!(r.status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&r.body));
        let job_id = r.json()["job_id"].as_str().unwrap().to_string();
        for _ in 0..2000 {
            let j = self.get(&format!("/api/v1/jobs/{job_id}")).await.json();
            match j["state"].as_str().unwrap() {
                "done" | "failed" => return j,
                _ => tokio::time::sleep(std::time::Duration::from_millis(20)).await,
            }
        }
        panic!("job {job_id} did not finish");
    }
}
