use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use serde_json::Value;
use tempfile::TempDir;
use trialmatch_core::report::LedgerExcerpt;
use trialmatch_service::store::{DocumentStore, FileStore};
use trialmatch_service::workspace::Workspace;

const PERFECT_SPEC: &str = r#"
version = 1
determination_date = "2024-06-01"
max_errors_per_pair = 1
max_true_disqualifying = 3

[[trials]]
trial_id = "19-410"
eligible = 3
not_eligible = 3

[[trials]]
trial_id = "22-259"
eligible = 3
not_eligible = 3
"#;

fn tm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trialmatch"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = tm(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

struct Fixture {
    _tmp: TempDir,
    syn: PathBuf,
    ws: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = TempDir::new().unwrap();
        let syn = tmp.path().join("syn");
        let ws = tmp.path().join("ws");
        let spec = tmp.path().join("spec.toml");
        std::fs::write(&spec, PERFECT_SPEC).unwrap();
        ok(&["synth", "--out", s(&syn), "--seed", "3", "--spec", s(&spec)]);
        ok(&["--workspace", s(&ws), "ingest", s(&syn.join("corpus.ndjson"))]);
        Fixture { _tmp: tmp, syn, ws }
    }

    fn file(&self, name: &str) -> String {
        s(&self.syn.join(name)).to_string()
    }

    fn run(&self, name: &str, extra: &[&str]) -> Output {
        let (ws, labels, script) = (s(&self.ws).to_string(), self.file("labels.json"), self.file("script.json"));
        let mut args = vec![
            "--workspace", &ws, "run", "--name", name, "--labels", &labels, "--backend", "scripted", "--script", &script,
        ];
        args.extend_from_slice(extra);
        tm(&args)
    }

    fn ledger(&self, run: &str) -> LedgerExcerpt {
        let ws = Workspace::new(Arc::new(FileStore::open(self.ws.join("store")).unwrap()));
        serde_json::from_slice(&ws.ledger_bytes(run).unwrap().unwrap()).unwrap()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flags_and_commands_are_usage_errors() {
    for args in [&["run", "--bogus"][..], &["frobnicate"], &["evaluate", "--run"], &[]] {
        let out = tm(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn evaluate_on_perfect_predictions_reports_accuracy_one_with_an_interval() {
    let f = Fixture::new();
    let out = f.run("r1", &["--no-kb"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ws = s(&f.ws).to_string();
    let json: Value = serde_json::from_str(&ok(&[
        "--workspace", &ws, "evaluate", "--run", "r1", "--labels", &f.file("labels.json"), "--json",
    ]))
    .unwrap();
    let acc = &json["ai"]["metrics"]["accuracy"];
    assert_eq!(acc["point"], 1.0);
    assert_eq!(acc["n"], 12);
    let lo = acc["lo"].as_f64().unwrap();
    assert!(lo > 0.0 && lo < 1.0, "lo = {lo}");
    assert_eq!(acc["hi"], 1.0);

    let text = ok(&["--workspace", &ws, "evaluate", "--run", "r1", "--labels", &f.file("labels.json")]);
    assert!(text.contains("accuracy         12/12"), "{text}");
    assert!(text.contains("false negative"));

    let bad = fails(&[
        "--workspace", &ws, "evaluate", "--run", "r1", "--labels", &f.file("labels.json"), "--confidence", "1",
    ]);
    assert!(bad.contains("confidence"));
    assert!(fails(&["--workspace", &ws, "evaluate", "--run", "nope", "--labels", &f.file("labels.json")])
        .contains("unknown run"));
}

#[test]
fn knowledge_base_runs_spend_more_prompt_tokens() {
    let f = Fixture::new();
    assert!(f.run("plain", &["--no-kb"]).status.success());
    let ws = s(&f.ws).to_string();
    ok(&[
        "--workspace", &ws, "kb", "append", "--text",
        "Treat a documented intention to treat as sufficient for consent criteria.", "--mode", "domain-knowledge",
    ]);
    assert!(f.run("with-kb", &["--kb"]).status.success());
    let (plain, kb) = (f.ledger("plain"), f.ledger("with-kb"));
    assert_eq!(plain.calls, kb.calls);
    assert!(kb.prompt_tokens > plain.prompt_tokens, "{} vs {}", kb.prompt_tokens, plain.prompt_tokens);
    assert!(kb.total_cost > plain.total_cost);

    let exported = ok(&["--workspace", &ws, "kb", "export"]);
    assert_eq!(exported.lines().count(), 2);
    assert!(fails(&["--workspace", &ws, "kb", "append", "--text", "x", "--mode", "hunch"]).contains("hunch"));
}

#[test]
fn failed_pairs_exit_nonzero_and_the_run_resumes() {
    let f = Fixture::new();
    let ws = s(&f.ws).to_string();
    let pairs = std::fs::read_to_string(f.syn.join("pairs.jsonl")).unwrap();
    let with_ghost = format!("{pairs}{{\"patient_id\":\"GHOST\",\"trial_id\":\"19-410\"}}\n");
    let ghost_file = f.syn.join("ghost.jsonl");
    std::fs::write(&ghost_file, with_ghost).unwrap();
    let script = f.file("script.json");
    let base = ["--workspace", &ws, "run", "--name", "r1", "--backend", "scripted", "--script", &script, "--pairs"];

    let mut args = base.to_vec();
    args.push(s(&ghost_file));
    let err = fails(&args);
    assert!(err.contains("1 pairs failed"), "{err}");
    let partial = f.ledger("r1");

    let mut args = base.to_vec();
    let pairs_file = f.file("pairs.jsonl");
    args.push(&pairs_file);
    let out = ok(&args);
    assert!(out.contains("12 of 13 pairs assessed"), "{out}");
    assert_eq!(f.ledger("r1"), partial);

    // Settings are fixed by the first invocation.
    args.extend(["--mode", "single"]);
    assert!(fails(&args).contains("config digest"));
}

#[test]
fn missing_inputs_are_reported() {
    let tmp = TempDir::new().unwrap();
    let ws = s(tmp.path()).to_string();
    let err = fails(&["--workspace", &ws, "run", "--name", "r1", "--pairs", "/nonexistent.jsonl"]);
    assert!(err.contains("ingest"), "{err}");
    assert!(fails(&["run", "--name", "r1", "--pairs", "x"]).contains("workspace"));
    assert!(fails(&["--workspace", &ws, "serve"]).contains("tokens"));
    assert!(fails(&["--config", "/nonexistent.toml", "--workspace", &ws, "index"]).contains("nonexistent"));
}

#[test]
fn triage_exports_the_queue_and_index_writes_snapshots() {
    let f = Fixture::new();
    assert!(f.run("r1", &[]).status.success());
    let ws = s(&f.ws).to_string();
    let out = f.syn.join("queue.json");
    ok(&["--workspace", &ws, "triage", "--run", "r1", "--out", s(&out)]);
    let queue: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(queue["policy"]["threshold"], 2);
    for item in queue["items"].as_array().unwrap() {
        let d = item["disqualifying_count"].as_u64().unwrap();
        assert!((1..=2).contains(&d));
    }
    let wider: Value = serde_json::from_str(&ok(&["--workspace", &ws, "triage", "--run", "r1", "--threshold", "3"])).unwrap();
    assert!(wider["items"].as_array().unwrap().len() >= queue["items"].as_array().unwrap().len());

    let summary = ok(&["--workspace", &ws, "index"]);
    assert!(summary.starts_with("indexed 12 patients"), "{summary}");
    let store = FileStore::open(f.ws.join("store")).unwrap();
    let labels: Value = serde_json::from_str(&std::fs::read_to_string(f.syn.join("labels.json")).unwrap()).unwrap();
    for l in labels.as_array().unwrap() {
        let collection = format!("index/{}", l["patient_id"].as_str().unwrap());
        let keys = store.list(&collection).unwrap();
        assert!(keys.contains(&"union.tmvs".to_string()), "{keys:?}");
        assert!(keys.len() >= 2);
    }
}
