//! Command-line front door: single-sample runs, batch evaluation, and trace
//! inspection, over live services or scripted fixtures.
//!
//! Exit codes: 0 success, 1 pipeline/runtime error, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use m3d_core::bon::{BonMode, Selection};
use m3d_core::cascade::{run_batch, run_pipeline, Deps, PipelineConfig, RoutingPolicy, RunRecord};
use m3d_core::evalkit::{
    aggregate_costs, compute_metrics, emit_report, load_dataset, PerSampleRow, Report,
};
use m3d_core::types::{ImageRef, Label, PipelineTrace, Sample, Stage};

mod inspect;

#[derive(Parser)]
#[command(name = "m3d", version, about = "Cascaded multi-agent misinformation detection engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline on one sample and print its label.
    Run(RunArgs),
    /// Evaluate a labeled JSONL dataset and write a metrics/cost report.
    Eval(EvalArgs),
    /// Render a trace file (JSON or JSONL) in human-readable form.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Single-pass reasoning everywhere.
    Standard,
    /// Best-of-N reasoning everywhere.
    Bon,
    /// Let the planning agent decide per sample.
    Planner,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SelectionArg {
    Argmax,
    Boltzmann,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BonModeArg {
    Faithful,
    Incremental,
}

/// Tunables shared by `run` and `eval`. Precedence: flags > environment >
/// config file > built-in defaults.
#[derive(Args, Debug)]
struct CommonArgs {
    /// JSON config file (the serialized engine configuration).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Routing policy.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,

    /// Best-of-N candidate budget N.
    #[arg(long, value_name = "N")]
    n: Option<usize>,

    /// Early-stopping confidence threshold τ (use "inf" to disable).
    #[arg(long, allow_hyphen_values = true)]
    tau: Option<f64>,

    /// Candidate selection strategy.
    #[arg(long, value_enum)]
    selection: Option<SelectionArg>,

    /// Boltzmann inverse temperature β (implies --selection boltzmann).
    #[arg(long)]
    beta: Option<f64>,

    /// BoN scheduling: score all N then rank, or grow incrementally.
    #[arg(long, value_enum)]
    bon_mode: Option<BonModeArg>,

    /// In-flight limit for concurrent candidate generation.
    #[arg(long)]
    concurrency: Option<usize>,

    /// OpenAI-compatible chat completions base URL.
    #[arg(long, env = "M3D_BACKEND_URL")]
    backend_url: Option<String>,

    /// Model identifier sent on the chat wire.
    #[arg(long)]
    model: Option<String>,

    /// Reward-scoring service base URL.
    #[arg(long, env = "M3D_REWARD_URL")]
    reward_url: Option<String>,

    /// Forgery-detection service base URL.
    #[arg(long, env = "M3D_FORGERY_URL")]
    forgery_url: Option<String>,

    /// Web-search (opensearch protocol) endpoint.
    #[arg(long)]
    web_search_url: Option<String>,

    /// Directory of JSONL fixtures; switches the engine to mock mode.
    #[arg(long, value_name = "DIR")]
    mock_fixtures: Option<PathBuf>,

    /// Prompt template override directory.
    #[arg(long, env = "M3D_TEMPLATES_DIR", value_name = "DIR")]
    templates: Option<PathBuf>,

    /// Base seed for candidate generation and Boltzmann sampling.
    #[arg(long)]
    seed: Option<u64>,

    /// Sampling temperature for single-pass, planner, and critique calls.
    #[arg(long)]
    temperature: Option<f64>,

    /// Sampling temperature for BoN candidate generation.
    #[arg(long)]
    bon_temperature: Option<f64>,

    #[arg(long)]
    max_tokens: Option<u32>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Sample as a JSON file with fields id, text, image, label.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["id", "text"])]
    input: Option<PathBuf>,

    /// Inline sample id (with --text).
    #[arg(long, requires = "text")]
    id: Option<String>,

    /// Inline claim text (with --id).
    #[arg(long, requires = "id")]
    text: Option<String>,

    /// Inline image locator (path, URL, or base64:…).
    #[arg(long)]
    image: Option<String>,

    /// Inline gold label for reference output.
    #[arg(long)]
    gold: Option<String>,

    /// Write the full trace (or the failure record) to this file.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,

    /// Replace existing output files.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Labeled JSONL dataset.
    #[arg(long, value_name = "FILE")]
    dataset: PathBuf,

    /// Report output path.
    #[arg(long, value_name = "FILE")]
    report: PathBuf,

    /// Also write one trace record per sample as JSONL.
    #[arg(long, value_name = "FILE")]
    traces: Option<PathBuf>,

    /// Include a per-sample table in the report.
    #[arg(long)]
    per_sample: bool,

    /// Replace existing output files.
    #[arg(long)]
    overwrite: bool,

    /// Worker count for the batch.
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
}

#[derive(Args)]
struct InspectArgs {
    /// Trace file: one JSON document or JSONL.
    path: PathBuf,

    /// Only show candidates for this stage.
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StageArg {
    Text,
    Image,
    Cross,
}

impl From<StageArg> for Stage {
    fn from(value: StageArg) -> Stage {
        match value {
            StageArg::Text => Stage::Text,
            StageArg::Image => Stage::Image,
            StageArg::Cross => Stage::Cross,
        }
    }
}

/// Errors mapped onto exit codes.
pub(crate) enum CliError {
    /// Bad flags, files, or configuration: exit 2.
    Usage(String),
    /// The pipeline or IO failed at runtime: exit 1.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Inspect(args) => inspect::cmd_inspect(&args.path, args.stage.map(Stage::from)),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// Merge config file, environment, and flags into the effective config.
fn effective_config(common: &CommonArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let body = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str::<PipelineConfig>(&body)
                .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };

    if let Some(mode) = common.mode {
        cfg.routing = match mode {
            ModeArg::Standard => RoutingPolicy::AlwaysStandard,
            ModeArg::Bon => RoutingPolicy::AlwaysBon,
            ModeArg::Planner => RoutingPolicy::Planner,
        };
    }
    if let Some(n) = common.n {
        cfg.bon.n_candidates = n;
    }
    if let Some(tau) = common.tau {
        cfg.bon.tau = tau;
    }
    match (common.selection, common.beta) {
        (Some(SelectionArg::Argmax), _) => cfg.bon.selection = Selection::Argmax,
        (Some(SelectionArg::Boltzmann), beta) => {
            cfg.bon.selection = Selection::Boltzmann { beta: beta.unwrap_or(1.0) };
        }
        (None, Some(beta)) => cfg.bon.selection = Selection::Boltzmann { beta },
        (None, None) => {}
    }
    if let Some(mode) = common.bon_mode {
        cfg.bon.mode = match mode {
            BonModeArg::Faithful => BonMode::Faithful,
            BonModeArg::Incremental => BonMode::Incremental,
        };
    }
    if let Some(limit) = common.concurrency {
        cfg.bon.concurrency_limit = limit;
    }
    if let Some(url) = &common.backend_url {
        cfg.endpoints.base_url = url.clone();
    }
    if let Some(model) = &common.model {
        cfg.endpoints.model = model.clone();
    }
    if let Some(url) = &common.reward_url {
        cfg.endpoints.reward_url = url.clone();
    }
    if let Some(url) = &common.forgery_url {
        cfg.endpoints.forgery_url = url.clone();
    }
    if let Some(url) = &common.web_search_url {
        cfg.endpoints.web_search_url = url.clone();
    }
    if let Some(dir) = &common.mock_fixtures {
        cfg.fixtures_dir = Some(dir.clone());
    }
    if let Some(dir) = &common.templates {
        cfg.templates_dir = Some(dir.clone());
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(t) = common.temperature {
        cfg.temperature = t;
    }
    if let Some(t) = common.bon_temperature {
        cfg.bon.temperature = t;
    }
    if let Some(m) = common.max_tokens {
        cfg.max_tokens = m;
    }

    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn build_deps(cfg: &PipelineConfig) -> Result<Deps, CliError> {
    Deps::from_config(cfg).map_err(CliError::Usage)
}

fn load_run_sample(args: &RunArgs) -> Result<Sample, CliError> {
    if let Some(path) = &args.input {
        let body = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let record: m3d_core::evalkit::DatasetRecord = serde_json::from_str(&body)
            .map_err(|e| CliError::Usage(format!("invalid sample {}: {e}", path.display())))?;
        let gold = match &record.label {
            Some(raw) => Some(
                Label::parse_name(raw)
                    .ok_or_else(|| CliError::Usage(format!("unknown label {raw:?}")))?,
            ),
            None => None,
        };
        let image = record.image.as_deref().map(ImageRef::infer).unwrap_or(ImageRef::Absent);
        return Sample::new(record.id, record.text, image, gold)
            .map_err(|e| CliError::Usage(e.to_string()));
    }
    match (&args.id, &args.text) {
        (Some(id), Some(text)) => {
            let image = args.image.as_deref().map(ImageRef::infer).unwrap_or(ImageRef::Absent);
            let gold = match &args.gold {
                Some(raw) => Some(
                    Label::parse_name(raw)
                        .ok_or_else(|| CliError::Usage(format!("unknown label {raw:?}")))?,
                ),
                None => None,
            };
            Sample::new(id.clone(), text.clone(), image, gold)
                .map_err(|e| CliError::Usage(e.to_string()))
        }
        _ => Err(CliError::Usage(
            "provide a sample via --input FILE or --id/--text (with optional --image, --gold)"
                .to_string(),
        )),
    }
}

fn write_output(path: &PathBuf, body: &str, overwrite: bool) -> Result<(), CliError> {
    if path.exists() && !overwrite {
        return Err(CliError::Usage(format!(
            "{} exists; pass --overwrite to replace it",
            path.display()
        )));
    }
    std::fs::write(path, body)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn stage_summary(trace: &PipelineTrace) -> String {
    let mut lines = Vec::new();
    for stage_trace in &trace.stage_traces {
        let line = if !stage_trace.activated {
            format!("{:<5} skipped", stage_trace.stage)
        } else {
            let mode = match stage_trace.mode {
                m3d_core::types::StageMode::Standard => "standard",
                m3d_core::types::StageMode::Bon => "bon",
            };
            let verdict = stage_trace
                .verdict
                .as_ref()
                .map(|v| if v.is_distorted { "distorted" } else { "original" })
                .unwrap_or("-");
            let stopping =
                stage_trace.stopping_prefix.map(|m| format!(" m*={m}")).unwrap_or_default();
            format!(
                "{:<5} {mode} candidates={}{} -> {verdict}",
                stage_trace.stage,
                stage_trace.candidates.len(),
                stopping
            )
        };
        lines.push(line);
    }
    lines.join("\n")
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let cfg = effective_config(&args.common)?;
    let sample = load_run_sample(&args)?;
    let deps = build_deps(&cfg)?;
    let config_echo =
        serde_json::to_value(&cfg).map_err(|e| CliError::Runtime(format!("config echo: {e}")))?;

    match run_pipeline(&sample, &cfg, &deps) {
        Ok(mut trace) => {
            trace.config_echo = Some(config_echo);
            println!("{}", trace.final_label.name().to_ascii_uppercase());
            println!("plan: {}", match trace.plan_level {
                m3d_core::types::PlanLevel::Level0 => "level0",
                m3d_core::types::PlanLevel::Level1 => "level1",
            });
            println!("{}", stage_summary(&trace));
            let total = trace.cost.total();
            println!(
                "cost: chat={} tool={} reward={} critique={} wall={}ms",
                total.chat_calls,
                total.tool_calls,
                total.reward_calls,
                total.critique_calls,
                trace.wall_time_ms
            );
            if let Some(gold) = sample.gold_label {
                let mark = if gold == trace.final_label { "match" } else { "MISMATCH" };
                println!("gold: {} ({mark})", gold.name().to_ascii_uppercase());
            }
            if let Some(path) = &args.trace {
                let body = serde_json::to_string_pretty(&trace)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                write_output(path, &(body + "\n"), args.overwrite)?;
            }
            Ok(())
        }
        Err(failure) => {
            if let Some(path) = &args.trace {
                let record = m3d_core::cascade::FailureRecord::from(failure);
                let body = serde_json::to_string_pretty(&record)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                write_output(path, &(body + "\n"), args.overwrite)?;
                return Err(CliError::Runtime(format!(
                    "sample {} failed at {} stage: {} (partial trace written)",
                    record.sample_id,
                    record.stage.map(|s| s.name()).unwrap_or("pipeline"),
                    record.error
                )));
            }
            Err(CliError::Runtime(failure.to_string()))
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    if args.parallelism == 0 {
        return Err(CliError::Usage("--parallelism must be >= 1".to_string()));
    }
    let cfg = effective_config(&args.common)?;
    let samples = load_dataset(&args.dataset).map_err(|e| CliError::Usage(e.to_string()))?;
    if samples.is_empty() {
        return Err(CliError::Usage("dataset is empty".to_string()));
    }
    if let Some(unlabeled) = samples.iter().find(|s| s.gold_label.is_none()) {
        return Err(CliError::Usage(format!(
            "eval requires gold labels; sample {:?} has none (use `run` for unlabeled samples)",
            unlabeled.id
        )));
    }

    let deps = build_deps(&cfg)?;
    let records = run_batch(&samples, &cfg, &deps, args.parallelism);

    if let Some(path) = &args.traces {
        let mut body = String::new();
        for record in &records {
            body.push_str(
                &serde_json::to_string(record).map_err(|e| CliError::Runtime(e.to_string()))?,
            );
            body.push('\n');
        }
        write_output(path, &body, args.overwrite)?;
    }

    let mut preds = Vec::new();
    let mut golds = Vec::new();
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut failed = 0usize;
    for (record, sample) in records.iter().zip(&samples) {
        let gold = sample.gold_label.expect("checked above");
        match record {
            RunRecord::Trace(trace) => {
                preds.push(trace.final_label);
                golds.push(gold);
                traces.push(trace.clone());
                rows.push(PerSampleRow {
                    id: sample.id.clone(),
                    gold: Some(gold),
                    predicted: Some(trace.final_label),
                    correct: Some(trace.final_label == gold),
                    plan_level: Some(trace.plan_level),
                    failed: false,
                });
            }
            RunRecord::Failure(f) => {
                failed += 1;
                eprintln!("sample {} failed: {}", f.sample_id, f.error);
                rows.push(PerSampleRow {
                    id: sample.id.clone(),
                    gold: Some(gold),
                    predicted: None,
                    correct: None,
                    plan_level: None,
                    failed: true,
                });
            }
        }
    }
    if traces.is_empty() {
        return Err(CliError::Runtime("every sample failed; no report written".to_string()));
    }

    let report = Report {
        metrics: compute_metrics(&preds, &golds).map_err(|e| CliError::Runtime(e.to_string()))?,
        costs: aggregate_costs(&traces).map_err(|e| CliError::Runtime(e.to_string()))?,
        config_echo: serde_json::to_value(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?,
        per_sample: args.per_sample.then_some(rows),
    };
    emit_report(&report, &args.report, args.overwrite).map_err(|e| {
        if e.kind() == std::io::ErrorKind::AlreadyExists {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    })?;

    println!(
        "samples={} accuracy={:.4} macro_f1={:.4} bon_ratio={:.3} mean_chat={:.2}",
        report.costs.samples,
        report.metrics.accuracy,
        report.metrics.macro_f1,
        report.costs.bon_activation_ratio,
        report.costs.mean_chat_calls
    );
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} sample(s) failed; see stderr")));
    }
    Ok(())
}
