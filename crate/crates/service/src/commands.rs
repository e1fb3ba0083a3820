use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use trialmatch_core::corpus::{ingest, Corpus};
use trialmatch_core::eligibility::EligibilityReport;
use trialmatch_core::eval::{generate_synthetic_cohort, CohortSpec, LabeledPair};
use trialmatch_core::index::{build_patient_stores, write_snapshot, SnapshotHeader};
use trialmatch_core::kb::{EntryScope, ErrorMode, KbSnapshot, KnowledgeBase, NewEntry};
use trialmatch_core::orchestrator::Mode;
use trialmatch_core::pipeline::PairRequest;
use trialmatch_core::protocol::{CriterionId, CriterionStatus};
use trialmatch_core::triage::{ReviewQueue, TriagePolicy};
use trialmatch_service::api::{router, AppState};
use trialmatch_service::config::ServiceConfig;
use trialmatch_service::engine::{build_embedder, build_routing, build_tokenizer, Engine, EngineOverrides};
use trialmatch_service::evaluation::evaluate_run;
use trialmatch_service::runner::execute_run;
use trialmatch_service::store::FileStore;
use trialmatch_service::workspace::Workspace;

use crate::{Cli, Command, KbCommand, LabelsCommand, ModeArg, RunArgs};

struct Setup {
    config: ServiceConfig,
    dir: Option<PathBuf>,
}

impl Setup {
    fn dir(&self) -> Result<&Path> {
        self.dir
            .as_deref()
            .ok_or_else(|| anyhow!("no workspace; pass --workspace or set `workspace` in the config"))
    }

    fn workspace(&self) -> Result<Workspace> {
        let root = self.dir()?.join("store");
        let store = FileStore::open(&root).with_context(|| format!("opening store {}", root.display()))?;
        Ok(Workspace::new(Arc::new(store)))
    }

    fn kb(&self) -> Result<KnowledgeBase> {
        let dir = self.dir()?;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(KnowledgeBase::open(&dir.join("knowledge.jsonl"))?)
    }

    fn corpus(&self, ws: &Workspace) -> Result<Corpus> {
        ws.load_corpus()?
            .ok_or_else(|| anyhow!("the workspace has no corpus; run `trialmatch ingest` first"))
    }
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => ServiceConfig::load(path)?,
        None => ServiceConfig::default(),
    };
    let dir = cli.workspace.clone().or_else(|| config.workspace.clone());
    let cx = Setup { config, dir };
    match cli.command {
        Command::Ingest(a) => ingest_cmd(&cx, &a.files),
        Command::Index => index_cmd(&cx),
        Command::Run(a) => run_cmd(&cx, a),
        Command::Evaluate(a) => evaluate_cmd(&cx, &a.run, &a.labels, a.confidence, a.json),
        Command::Triage(a) => triage_cmd(&cx, &a.run, a.threshold, a.out.as_deref()),
        Command::Serve(a) => serve_cmd(&cx, a.bind),
        Command::Kb(k) => kb_cmd(&cx, k),
        Command::Labels(LabelsCommand::Import { name, file }) => {
            let labels = read_labels(&file)?;
            cx.workspace()?.save_labels(&name, &labels)?;
            println!("stored {} labels as `{name}`", labels.len());
            Ok(())
        }
        Command::Synth(a) => synth_cmd(&cx, &a.out, a.seed, a.spec.as_deref()),
    }
}

fn ingest_cmd(cx: &Setup, files: &[PathBuf]) -> Result<()> {
    let mut docs = Vec::new();
    for f in files {
        let file = File::open(f).with_context(|| format!("opening {}", f.display()))?;
        let part = ingest(BufReader::new(file)).with_context(|| format!("reading {}", f.display()))?;
        docs.extend(part.iter().cloned());
    }
    let corpus = trialmatch_core::corpus::ingest_records(docs)?;
    cx.workspace()?.save_corpus(&corpus)?;
    println!(
        "ingested {} documents for {} patients",
        corpus.document_count(),
        corpus.patient_count()
    );
    Ok(())
}

fn index_cmd(cx: &Setup) -> Result<()> {
    let ws = cx.workspace()?;
    let corpus = cx.corpus(&ws)?;
    let tokenizer = build_tokenizer(&cx.config)?;
    let embedder = build_embedder(&cx.config)?;
    let routing = build_routing(cx.config.routing.as_ref())?;
    let chunking = cx.config.chunking;
    let header = SnapshotHeader {
        tokenizer_id: tokenizer.id().to_string(),
        embedder_id: embedder.id().to_string(),
        chunking,
    };
    let (mut documents, mut dropped, mut chunks) = (0, 0, 0);
    for patient in corpus.patient_ids() {
        let docs = corpus.documents(patient).unwrap_or_default();
        let (stores, report) = build_patient_stores(
            patient,
            docs,
            &routing,
            tokenizer.as_ref(),
            &chunking,
            embedder.as_ref(),
        )?;
        for f in &report.failures {
            eprintln!("warning: patient {patient}: {f:?}");
        }
        let collection = format!("index/{patient}");
        let put = |name: &str, store: &trialmatch_core::index::VectorStore| -> Result<()> {
            let mut bytes = Vec::new();
            write_snapshot(&mut bytes, store, &header)?;
            ws.store().put(&collection, &format!("{name}.tmvs"), &bytes)?;
            Ok(())
        };
        for (specialty, store) in &stores.by_specialty {
            put(specialty.slug(), store)?;
        }
        put("union", &stores.union)?;
        documents += report.documents;
        dropped += report.dropped_documents;
        chunks += report.chunks;
    }
    println!(
        "indexed {} patients: {documents} documents ({dropped} unrouted), {chunks} chunks",
        corpus.patient_count()
    );
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<LabeledPair>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing labels {}", path.display()))
}

fn read_pairs(path: &Path) -> Result<Vec<PairRequest>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn run_cmd(cx: &Setup, a: RunArgs) -> Result<()> {
    let ws = cx.workspace()?;
    let corpus = cx.corpus(&ws)?;
    let pairs = match (&a.pairs, &a.labels) {
        (Some(p), _) => read_pairs(p)?,
        (None, Some(l)) => read_labels(l)?
            .into_iter()
            .map(|l| PairRequest {
                patient_id: l.patient_id,
                trial_id: l.trial_id,
                cutoff: Some(l.determination_date),
            })
            .collect(),
        (None, None) => bail!("pass --pairs or --labels"),
    };
    let overrides = EngineOverrides {
        mode: a.mode.map(|m| match m {
            ModeArg::Multi => Mode::MultiExpert,
            ModeArg::Single => Mode::SingleExpert,
        }),
        backend: a.backend,
        script: a.script,
        cassette: a.cassette,
        record: a.record,
        parallelism: a.parallelism,
    };
    let engine = Engine::build(&cx.config, &overrides)?;
    for p in &pairs {
        if engine.trial(&p.trial_id).is_none() {
            bail!("unknown trial `{}`", p.trial_id);
        }
    }
    let kb = if a.no_kb { KbSnapshot::empty() } else { cx.kb()?.snapshot() };
    let manifest = execute_run(&ws, &engine, &corpus, &kb, &a.name, &pairs, &mut |p| {
        tracing::info!(completed = p.completed, failed = p.failed, total = p.total, "progress");
    })?;
    let ledger: trialmatch_core::report::LedgerExcerpt =
        serde_json::from_slice(&ws.ledger_bytes(&a.name)?.unwrap_or_default())?;
    println!(
        "run {}: {} of {} pairs assessed, kb version {}",
        manifest.name,
        manifest.completed,
        manifest.pairs.len(),
        manifest.kb_version
    );
    println!(
        "model calls {}, prompt tokens {}, completion tokens {}, cost {:.6}",
        ledger.calls, ledger.prompt_tokens, ledger.completion_tokens, ledger.total_cost
    );
    if !manifest.failures.is_empty() {
        for f in &manifest.failures {
            eprintln!("failed: {f:?}");
        }
        bail!(
            "{} pairs failed; completed reports are saved and rerunning `run --name {}` retries the rest",
            manifest.failures.len(),
            manifest.name
        );
    }
    Ok(())
}

fn run_reports(ws: &Workspace, run: &str) -> Result<Vec<EligibilityReport>> {
    if ws.load_manifest(run)?.is_none() {
        bail!("unknown run `{run}`");
    }
    Ok(ws.load_reports(run)?.into_iter().map(|d| d.report).collect())
}

fn evaluate_cmd(cx: &Setup, run: &str, labels: &Path, confidence: f64, json: bool) -> Result<()> {
    let ws = cx.workspace()?;
    let reports = run_reports(&ws, run)?;
    let labels = read_labels(labels)?;
    let queue = ws.load_queue(run)?;
    let m = evaluate_run(&reports, queue.as_ref(), &labels, confidence)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&m)?);
    } else {
        print!("{}", m.to_text());
    }
    Ok(())
}

fn triage_cmd(cx: &Setup, run: &str, threshold: Option<usize>, out: Option<&Path>) -> Result<()> {
    let ws = cx.workspace()?;
    let policy = TriagePolicy::new(threshold.unwrap_or(cx.config.triage.threshold))?;
    let queue = match ws.load_queue(run)? {
        Some(q) if q.policy == policy => q,
        Some(q) if q.unresolved() < q.len() => bail!(
            "run `{run}` already has review decisions under threshold {}",
            q.policy.threshold
        ),
        _ => {
            let q = ReviewQueue::build(&run_reports(&ws, run)?, policy);
            ws.save_queue(run, &q)?;
            q
        }
    };
    let mut body = serde_json::to_vec_pretty(&queue)?;
    body.push(b'\n');
    match out {
        Some(path) => {
            fs::write(path, &body).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("{} items queued for review", queue.len());
        }
        None => std::io::stdout().write_all(&body)?,
    }
    Ok(())
}

fn serve_cmd(cx: &Setup, bind: Option<String>) -> Result<()> {
    let tokens = cx.config.resolve_tokens();
    if tokens.is_empty() {
        bail!("no API tokens configured; add [[server.tokens]] entries to the config");
    }
    let ws = cx.workspace()?;
    let corpus = ws.load_corpus()?.unwrap_or_default();
    let engine = Engine::build(&cx.config, &EngineOverrides::default())?;
    let policy = TriagePolicy::new(cx.config.triage.threshold)?;
    let state = AppState::new(
        ws,
        Arc::new(engine),
        corpus,
        cx.kb()?,
        tokens,
        policy,
        Arc::new(chrono::Utc::now),
    )?;
    let bind = bind.unwrap_or_else(|| cx.config.server.bind.clone());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        tracing::info!(address = %listener.local_addr()?, "serving");
        axum::serve(listener, router(Arc::new(state)))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn kb_cmd(cx: &Setup, cmd: KbCommand) -> Result<()> {
    let mut kb = cx.kb()?;
    match cmd {
        KbCommand::Append {
            text,
            mode,
            author,
            trial,
            criterion,
        } => {
            let error_mode: ErrorMode = serde_json::from_value(serde_json::Value::String(mode.clone()))
                .map_err(|_| anyhow!("unknown error mode `{mode}`"))?;
            let entry = kb.append(
                NewEntry {
                    text,
                    error_mode,
                    scope: trial.map(|trial_id| EntryScope {
                        trial_id,
                        criterion_id: criterion,
                    }),
                    author,
                },
                chrono::Utc::now(),
            )?;
            println!("appended {} (knowledge base version {})", entry.entry_id, kb.version());
        }
        KbCommand::Export { out } => match out {
            Some(path) => fs::write(&path, kb.export()).with_context(|| format!("writing {}", path.display()))?,
            None => print!("{}", kb.export()),
        },
        KbCommand::Import { file } => {
            let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let added = kb.import(&text)?;
            println!("imported {added} entries (knowledge base version {})", kb.version());
        }
    }
    Ok(())
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

#[derive(Serialize)]
struct TruthRow<'a> {
    trial_id: &'a str,
    patient_id: &'a str,
    statuses: &'a BTreeMap<CriterionId, CriterionStatus>,
}

fn synth_cmd(cx: &Setup, out: &Path, seed: u64, spec: Option<&Path>) -> Result<()> {
    let spec = match spec {
        Some(p) => CohortSpec::load(p).map_err(|e| anyhow!(e))?,
        None => CohortSpec::packaged(),
    };
    let trials = match &cx.config.protocols {
        Some(dir) => trialmatch_core::protocol::load_protocol_dir(dir)?,
        None => trialmatch_core::fixtures::six_trial_protocols(),
    };
    let cohort = generate_synthetic_cohort(&spec, &trials, seed).map_err(|e| anyhow!(e))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let write = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let path = out.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    };
    write(
        "corpus.ndjson",
        trialmatch_core::corpus::to_ndjson(&cohort.documents).into_bytes(),
    )?;
    write("script.json", pretty(&cohort.backend().to_file())?)?;
    write("labels.json", pretty(&cohort.pairs)?)?;
    let pairs: String = cohort
        .pair_requests()
        .iter()
        .map(|p| serde_json::to_string(p).map(|s| s + "\n"))
        .collect::<Result<_, _>>()?;
    write("pairs.jsonl", pairs.into_bytes())?;
    let truth: Vec<TruthRow> = cohort
        .truth
        .iter()
        .map(|(k, statuses)| TruthRow {
            trial_id: &k.trial_id,
            patient_id: &k.patient_id,
            statuses,
        })
        .collect();
    write("truth.json", pretty(&truth)?)?;
    write("injected.json", pretty(&cohort.injected)?)?;
    println!(
        "wrote {} pairs, {} documents and {} injected errors to {}",
        cohort.pairs.len(),
        cohort.documents.len(),
        cohort.injected.len(),
        out.display()
    );
    Ok(())
}
