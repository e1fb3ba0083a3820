mod common;

use axum::http::{Method, StatusCode};
use chrono::DateTime;
use common::{harness, ALICE, BOB};
use serde_json::{json, Value};
use trialmatch_service::api::{CONFIG_DIGEST_HEADER, KB_DIGEST_HEADER, KB_VERSION_HEADER};

fn first_item(queue: &Value) -> (String, String, u64) {
    let item = &queue["items"][0];
    (
        item["trial_id"].as_str().unwrap().into(),
        item["patient_id"].as_str().unwrap().into(),
        item["version"].as_u64().unwrap(),
    )
}

#[tokio::test]
async fn requests_without_a_known_token_are_rejected() {
    let h = harness(1);
    for token in [None, Some("wrong")] {
        let r = h.call(Method::GET, "/api/v1/trials", token, None, None).await;
        assert_eq!(r.status, StatusCode::UNAUTHORIZED);
        assert_eq!(r.json()["error"]["code"], "unauthenticated");
        assert_eq!(r.header(CONFIG_DIGEST_HEADER), h.state.config_digest);
        assert_eq!(r.header(KB_VERSION_HEADER), "0");
    }
}

#[tokio::test]
async fn catalog_lists_trials_and_patients() {
    let h = harness(1);
    let r = h.get("/api/v1/trials").await;
    assert_eq!(r.status, StatusCode::OK);
    let trials = r.json()["trials"].as_array().unwrap().clone();
    assert_eq!(trials.len(), 6);
    let total: u64 = trials.iter().map(|t| t["criteria"].as_u64().unwrap()).sum();
    assert_eq!(total, 135);
    assert_eq!(h.get("/api/v1/trials/19-410").await.json()["id"], "19-410");
    assert_eq!(h.get("/api/v1/trials/00-000").await.status, StatusCode::NOT_FOUND);
    let patients = h.get("/api/v1/patients").await.json();
    assert_eq!(patients["patients"].as_array().unwrap().len(), 10);
    assert_eq!(h.get("/api/v1/nowhere").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn reports_are_served_byte_identical_with_evidence() {
    let h = harness(1);
    let job = h.run_all("r1").await;
    assert_eq!(job["state"], "done");
    assert_eq!(job["progress"]["completed"], 10);

    let listed = h.get("/api/v1/runs/r1/reports").await.json();
    assert_eq!(listed["reports"].as_array().unwrap().len(), 10);
    let pair = &h.cohort.pairs[0];
    let uri = format!("/api/v1/runs/r1/reports/{}/{}", pair.trial_id, pair.patient_id);
    let served = h.get(&uri).await;
    let stored = h.state.ws.report_bytes("r1", &pair.trial_id, &pair.patient_id).unwrap().unwrap();
    assert_eq!(served.body, stored);

    let report = served.json();
    let mut checked = 0;
    for a in report["assessments"].as_array().unwrap() {
        let cid = a["criterion_id"].as_str().unwrap();
        let ev = h
            .get(&format!("{uri}/evidence/{}", cid.replace(' ', "%20")))
            .await
            .json();
        assert_eq!(ev["final_status"], a["final_status"]);
        for op in ev["opinions"].as_array().unwrap() {
            for e in op["evidence"].as_array().unwrap() {
                let doc = h
                    .cohort
                    .documents
                    .iter()
                    .find(|d| d.doc_id == e["doc_id"].as_str().unwrap())
                    .unwrap();
                assert!(doc.text.contains(e["text"].as_str().unwrap()));
                assert_eq!(e["note_type"], doc.note_type.as_str());
                assert_eq!(e["created_date"], doc.created_date.to_string());
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
    assert_eq!(h.get(&format!("{uri}/evidence/nope")).await.status, StatusCode::NOT_FOUND);
    assert_eq!(h.get("/api/v1/runs/r9/reports").await.status, StatusCode::NOT_FOUND);
    let ledger = h.get("/api/v1/runs/r1/ledger").await.json();
    assert!(ledger["prompt_tokens"].as_u64().unwrap() > 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_submissions_are_unprocessable() {
    let h = harness(1);
    let bad_trial = json!({"run": "r1", "pairs": [{"patient_id": h.cohort.pairs[0].patient_id, "trial_id": "00-000"}]});
    assert_eq!(h.post("/api/v1/runs", ALICE, &bad_trial).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    let bad_name = json!({"run": "../x", "pairs": []});
    assert_eq!(h.post("/api/v1/runs", ALICE, &bad_name).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    let extra = json!({"run": "r1", "pairs": [], "surprise": 1});
    assert_eq!(h.post("/api/v1/runs", ALICE, &extra).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(h.post("/api/v1/kb", ALICE, &json!({"text": "  "})).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(h.get("/api/v1/jobs/job-999999").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn triage_claims_decisions_and_sessions() {
    let h = harness(1);
    h.run_all("r1").await;
    let queue = h.get("/api/v1/runs/r1/triage").await.json();
    assert_eq!(queue["policy"]["threshold"], 2);
    let n = queue["items"].as_array().unwrap().len();
    assert!(n >= 2, "queue has {n} items");
    let (trial, patient, version) = first_item(&queue);
    let base = format!("/api/v1/runs/r1/triage/{trial}/{patient}");

    let claimed = h.post(&format!("{base}/claim"), ALICE, &json!({"version": version})).await;
    assert_eq!(claimed.status, StatusCode::OK);
    let version = claimed.json()["version"].as_u64().unwrap();
    let stolen = h.post(&format!("{base}/claim"), BOB, &json!({"version": version})).await;
    assert_eq!(stolen.status, StatusCode::CONFLICT);
    let stale = h
        .post(&format!("{base}/decision"), ALICE, &json!({"version": version - 1, "decision": "confirm"}))
        .await;
    assert_eq!(stale.status, StatusCode::CONFLICT);

    let report = h.get(&format!("/api/v1/runs/r1/reports/{trial}/{patient}")).await.json();
    let target = report["assessments"]
        .as_array()
        .unwrap()
        .iter()
        .find(|a| a["short_circuited"] == false)
        .unwrap()["criterion_id"]
        .clone();
    let no_note = json!({"version": version, "decision": "override",
        "overrides": [{"criterion_id": target, "status": "unable-to-determine"}]});
    let r = h.post(&format!("{base}/decision"), ALICE, &no_note).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(r.json()["error"]["message"].as_str().unwrap().contains("note"));
    assert_eq!(
        h.post(&format!("{base}/decision"), ALICE, &json!({"version": version, "decision": "override"}))
            .await
            .status,
        StatusCode::UNPROCESSABLE_ENTITY
    );

    let with_note = json!({"version": version, "decision": "override",
        "overrides": [{"criterion_id": target, "status": "unable-to-determine",
                       "note": "Imaging alone does not settle this criterion.", "error_mode": "domain-knowledge"}]});
    let r = h.post(&format!("{base}/decision"), ALICE, &with_note).await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.body));
    assert_eq!(r.json()["state"], "overridden");
    assert_eq!(r.header(KB_VERSION_HEADER), "1");
    let kb = h.get("/api/v1/kb").await.json();
    assert_eq!(kb["entries"][0]["author"], "alice");

    let again = h.post(&format!("{base}/decision"), ALICE, &with_note).await;
    assert_eq!(again.status, StatusCode::CONFLICT);

    let events = h.get("/api/v1/runs/r1/sessions").await.json()["events"].clone();
    let events = events.as_array().unwrap();
    assert_eq!(events.len(), 2);
    assert_eq!(events[0]["event"], "opened");
    assert_eq!(events[1]["event"], "decided");
    let at = |e: &Value| DateTime::parse_from_rfc3339(e["at"].as_str().unwrap()).unwrap();
    let duration = (at(&events[1]) - at(&events[0])).num_milliseconds();
    let item = h.get(&base).await.json();
    assert_eq!(item["review_duration_ms"].as_i64().unwrap(), duration);
    assert!(duration > 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn metrics_include_workflow_once_review_is_complete() {
    let h = harness(1);
    h.run_all("r1").await;
    let labels = serde_json::to_value(&h.cohort.pairs).unwrap();
    let r = h
        .call(Method::PUT, "/api/v1/labels/truth", Some(ALICE), Some(&labels), None)
        .await;
    assert_eq!(r.status, StatusCode::OK);
    let m = h.get("/api/v1/runs/r1/metrics?labels=truth").await.json()["metrics"].clone();
    assert_eq!(m["pairs"], 10);
    assert!(m["workflow"].is_null());
    assert_eq!(h.get("/api/v1/runs/r1/metrics").await.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(
        h.get("/api/v1/runs/r1/metrics?labels=truth&confidence=1.5").await.status,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(h.get("/api/v1/runs/r1/metrics?labels=missing").await.status, StatusCode::NOT_FOUND);

    let queue = h.get("/api/v1/runs/r1/triage").await.json();
    for item in queue["items"].as_array().unwrap() {
        let base = format!(
            "/api/v1/runs/r1/triage/{}/{}",
            item["trial_id"].as_str().unwrap(),
            item["patient_id"].as_str().unwrap()
        );
        let v = h.post(&format!("{base}/claim"), BOB, &json!({"version": item["version"]})).await.json()["version"].clone();
        let r = h.post(&format!("{base}/decision"), BOB, &json!({"version": v, "decision": "confirm"})).await;
        assert_eq!(r.status, StatusCode::OK);
    }
    let m = h.get("/api/v1/runs/r1/metrics?labels=truth&confidence=0.9").await.json()["metrics"].clone();
    assert_eq!(m["ai"]["metrics"]["confidence"], 0.9);
    assert_eq!(m["workflow"]["confusion"], m["ai"]["confusion"]);
    assert_eq!(m["reviewed"], queue["items"].as_array().unwrap().len());
}

#[tokio::test]
async fn idempotency_key_replays_the_first_response() {
    let h = harness(1);
    let entry = json!({"text": "Biopsy-proven recurrence counts as progression.", "error_mode": "domain-knowledge"});
    let first = h.call(Method::POST, "/api/v1/kb", Some(ALICE), Some(&entry), Some("k-1")).await;
    assert_eq!(first.status, StatusCode::CREATED);
    let digest_after_first = first.header(KB_DIGEST_HEADER).to_string();
    let second = h.call(Method::POST, "/api/v1/kb", Some(ALICE), Some(&entry), Some("k-1")).await;
    assert_eq!(second.status, StatusCode::CREATED);
    assert_eq!(second.body, first.body);
    assert_eq!(second.header(KB_VERSION_HEADER), "1");
    assert_eq!(second.header(KB_DIGEST_HEADER), digest_after_first);

    let changed = json!({"text": "Something else."});
    let reused = h.call(Method::POST, "/api/v1/kb", Some(ALICE), Some(&changed), Some("k-1")).await;
    assert_eq!(reused.status, StatusCode::UNPROCESSABLE_ENTITY);

    // Keys are per reviewer.
    let bob = h.call(Method::POST, "/api/v1/kb", Some(BOB), Some(&entry), Some("k-1")).await;
    assert_eq!(bob.status, StatusCode::CREATED);
    assert_eq!(h.get("/api/v1/kb").await.json()["version"], 2);
    let fresh = h.call(Method::POST, "/api/v1/kb", Some(ALICE), Some(&entry), None).await;
    assert_eq!(fresh.status, StatusCode::CREATED);
    assert_eq!(fresh.header(KB_VERSION_HEADER), "3");
}

#[tokio::test(flavor = "multi_thread")]
async fn idempotent_claim_is_not_a_conflict() {
    let h = harness(1);
    h.run_all("r1").await;
    let (trial, patient, version) = first_item(&h.get("/api/v1/runs/r1/triage").await.json());
    let uri = format!("/api/v1/runs/r1/triage/{trial}/{patient}/claim");
    let body = json!({"version": version});
    let a = h.call(Method::POST, &uri, Some(ALICE), Some(&body), Some("claim-1")).await;
    let b = h.call(Method::POST, &uri, Some(ALICE), Some(&body), Some("claim-1")).await;
    assert_eq!(a.status, StatusCode::OK);
    assert_eq!(b.body, a.body);
    let c = h.call(Method::POST, &uri, Some(ALICE), Some(&body), None).await;
    assert_eq!(c.status, StatusCode::CONFLICT);
    assert_eq!(h.get("/api/v1/runs/r1/sessions").await.json()["events"].as_array().unwrap().len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn rerunning_a_finished_run_resumes_without_new_reports() {
    let h = harness(1);
    let first = h.run_all("r1").await;
    let before = h.get("/api/v1/runs/r1/ledger").await.body;
    let second = h.run_all("r1").await;
    assert_eq!(second["state"], "done");
    assert_eq!(second["progress"], first["progress"]);
    assert_eq!(h.get("/api/v1/runs/r1/ledger").await.body, before);
    let runs = h.get("/api/v1/runs").await.json();
    assert_eq!(runs["runs"][0]["completed"], 10);
}
