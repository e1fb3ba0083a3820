use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

use trialmatch_service::config::BackendKind;

#[derive(Debug, Parser)]
#[command(name = "trialmatch", version, about = "Clinical trial eligibility prescreening")]
struct Cli {
    /// Service configuration (TOML). Built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Workspace directory; overrides `workspace` in the config.
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load patient documents (newline-delimited JSON) into the workspace.
    Ingest(IngestArgs),
    /// Chunk and embed every patient's documents into per-specialty snapshots.
    Index,
    /// Assess (patient, trial) pairs. Reruns of a name resume where it stopped.
    Run(RunArgs),
    /// Accuracy, sensitivity, specificity, PPV and NPV with Wilson intervals.
    Evaluate(EvaluateArgs),
    /// Build (on first use) and export a run's review queue.
    Triage(TriageArgs),
    /// Serve the review API.
    Serve(ServeArgs),
    /// Knowledge-base maintenance.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Store a label set for the metrics endpoint.
    #[command(subcommand)]
    Labels(LabelsCommand),
    /// Generate a synthetic cohort with a matching scripted model.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// NDJSON files; together they replace the stored corpus.
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Multi,
    Single,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    name: String,
    /// Pairs as JSON lines of {"patient_id", "trial_id", "cutoff"?}.
    #[arg(long, conflicts_with = "labels", required_unless_present = "labels")]
    pairs: Option<PathBuf>,
    /// Take the pairs from a label file; each determination date is the cutoff.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Include the knowledge base in prompts (default).
    #[arg(long, overrides_with = "no_kb")]
    kb: bool,
    /// Run without the knowledge base.
    #[arg(long = "no-kb", overrides_with = "kb")]
    no_kb: bool,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Script for the scripted backend.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Cassette for the replay backend.
    #[arg(long)]
    cassette: Option<PathBuf>,
    /// Record every completion to this cassette.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    run: String,
    /// Label file (JSON array).
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    /// Print JSON instead of tables.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct TriageArgs {
    #[arg(long)]
    run: String,
    /// Maximum disqualifying count sent to review; the config value by default.
    #[arg(long)]
    threshold: Option<usize>,
    /// Write the queue here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Listen address; the config value by default.
    #[arg(long)]
    bind: Option<String>,
}

#[derive(Debug, Subcommand)]
enum KbCommand {
    /// Append one entry.
    Append {
        #[arg(long)]
        text: String,
        /// domain-knowledge, logical, missing-information, irrelevant-criterion or other.
        #[arg(long, default_value = "other")]
        mode: String,
        #[arg(long, default_value = "operator")]
        author: String,
        #[arg(long)]
        trial: Option<String>,
        #[arg(long, requires = "trial")]
        criterion: Option<String>,
    },
    /// Write the full log.
    Export {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Append entries of an exported log that are not yet present.
    Import { file: PathBuf },
}

#[derive(Debug, Subcommand)]
enum LabelsCommand {
    Import { name: String, file: PathBuf },
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Cohort spec (TOML); the packaged spec when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn,trialmatch=info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
