//! `costfix` command line.
//!
//! Exit codes: 0 when every requested bug ended with a plausible patch (or the
//! command had nothing to repair and succeeded), 2 when a repair exhausted its
//! budget, 1 on any error. Human-readable text goes to stderr; `--json` puts a
//! machine-readable summary on stdout.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use costfix::domain::{BugBundle, RepairConfig, RepairOutcome, TerminalState};
use costfix::harness::{CachedEvaluator, ShellHarness};
use costfix::llm::{
    CachedSampler, Client, HttpBackend, Offline, RetryPolicy, Sampler, ScriptedBackend,
};
use costfix::orchestrator::repair_with;
use costfix::prompts::PromptBuilder;
use costfix::report::{self, BugRow};
use costfix::store::{CacheMode, Store};
use costfix::templates::TemplateSet;
use costfix::tokenizer::counter_for_scheme;

const OUTCOME_SUFFIX: &str = ".outcome.json";

#[derive(Parser)]
#[command(
    name = "costfix",
    version,
    about = "Token-frugal program repair with a chat model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Repair one bug bundle.
    Repair {
        bundle: PathBuf,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Repair every bundle in a directory and write a report.
    Batch {
        corpus: PathBuf,
        #[command(flatten)]
        engine: EngineArgs,
        /// Bugs repaired at the same time.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Baseline cost table (bug_id, tokens_total, fixed).
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Re-run a recorded repair from the cache only.
    Replay {
        bundle: PathBuf,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Summarize stored outcomes.
    Report {
        outcome_dir: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Where report files go; defaults to the outcome directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Clone)]
struct EngineArgs {
    /// TOML file with engine settings; flags win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_invoke: Option<u32>,
    #[arg(long)]
    max_rounds: Option<u32>,
    /// Samples requested per invocation.
    #[arg(long)]
    samples: Option<u32>,
    #[arg(long)]
    mult_invocations: Option<u32>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    /// record, replay or passthrough.
    #[arg(long, default_value = "record")]
    mode: CacheMode,
    #[arg(long)]
    token_limit: Option<usize>,
    /// Wall-clock limit for each compile or test command.
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// Cache directory.
    #[arg(long, default_value = "costfix-cache")]
    cache: PathBuf,
    /// Output directory for outcomes and reports.
    #[arg(long, default_value = "costfix-out")]
    out: PathBuf,
    /// Scripted replies instead of a live model: a JSON-lines file, or a
    /// directory of `<bug_id>.jsonl` files.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

impl EngineArgs {
    fn repair_config(&self) -> Result<RepairConfig> {
        let mut c = match &self.config {
            Some(p) => costfix::load_config(p)?,
            None => RepairConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $field:ident) => {
                if let Some(v) = self.$flag.clone() {
                    c.$field = v;
                }
            };
        }
        set!(max_invoke => max_invoke);
        set!(max_rounds => max_rounds);
        set!(samples => samples_per_request);
        set!(mult_invocations => multiplication_invocations);
        set!(temperature => temperature);
        set!(model => model_id);
        set!(endpoint => endpoint_url);
        set!(token_limit => prompt_token_limit);
        set!(timeout_secs => eval_timeout_secs);
        c.validate()?;
        Ok(c)
    }

    fn prompt_builder(&self, config: &RepairConfig) -> Result<PromptBuilder> {
        let templates = match &self.templates {
            Some(dir) => TemplateSet::load_dir(dir)
                .with_context(|| format!("loading templates from {}", dir.display()))?,
            None => TemplateSet::default(),
        };
        let counter =
            counter_for_scheme(&config.tokenizer_scheme).context("unknown tokenizer scheme")?;
        Ok(PromptBuilder::new(
            templates,
            counter,
            config.prompt_token_limit,
        ))
    }

    /// The model behind the cache for one bug.
    fn sampler(&self, config: &RepairConfig, bug_id: &str) -> Result<Box<dyn Sampler>> {
        if self.mode == CacheMode::Replay {
            return Ok(Box::new(Offline));
        }
        let counter =
            counter_for_scheme(&config.tokenizer_scheme).context("unknown tokenizer scheme")?;
        match &self.script {
            Some(path) => {
                let file = if path.is_dir() {
                    path.join(format!("{bug_id}.jsonl"))
                } else {
                    path.clone()
                };
                let backend = ScriptedBackend::from_file(&file)?;
                let client = Client::new(
                    backend,
                    RetryPolicy {
                        max_retries: config.max_retries,
                        base_delay: Duration::ZERO,
                    },
                    counter,
                )
                .with_cap(config.provider_max_n);
                Ok(Box::new(client))
            }
            None => {
                let backend = HttpBackend::new(
                    &config.endpoint_url,
                    Duration::from_secs(config.request_timeout_secs),
                )?
                .with_max_n(config.provider_max_n);
                Ok(Box::new(Client::from_config(backend, config, counter)))
            }
        }
    }
}

/// Repairs one loaded bundle through the cache.
fn run_one(
    bundle: &BugBundle,
    engine: &EngineArgs,
    config: &RepairConfig,
    store: &Store,
) -> Result<RepairOutcome> {
    let builder = engine.prompt_builder(config)?;
    let version = builder.templates().version.clone();
    let live = engine.sampler(config, &bundle.bug_id)?;
    let harness = ShellHarness::new(
        Duration::from_secs(config.eval_timeout_secs),
        config.workers(),
    );
    let sampler = CachedSampler::new(live.as_ref(), store, &bundle.bug_id);
    let evaluator = CachedEvaluator::new(&harness, store, bundle, &version)?;
    let outcome = repair_with(bundle, config, builder, &sampler, &evaluator);
    store.flush()?;
    Ok(outcome?)
}

fn outcome_path(out: &Path, bug_id: &str) -> PathBuf {
    out.join(format!("{bug_id}{OUTCOME_SUFFIX}"))
}

fn outcome_bytes(outcome: &RepairOutcome) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(outcome)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn write_outcome(out: &Path, outcome: &RepairOutcome) -> Result<PathBuf> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = outcome_path(out, &outcome.bug_id);
    std::fs::write(&path, outcome_bytes(outcome)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn describe(outcome: &RepairOutcome) -> String {
    let row = BugRow::from_outcome(outcome);
    format!(
        "{}: {:?} after {} round(s), {} step-1 invocation(s), {} plausible, correct={}, {} tokens",
        row.bug_id,
        outcome.terminal_state,
        row.rounds_used,
        row.step1_invocations,
        row.plausible_count,
        row.correct,
        row.tokens()
    )
}

fn exit_for(state: TerminalState) -> ExitCode {
    match state {
        TerminalState::FixedPlausible => ExitCode::SUCCESS,
        TerminalState::Exhausted => ExitCode::from(2),
    }
}

fn cmd_repair(bundle_dir: &Path, engine: &EngineArgs) -> Result<ExitCode> {
    let config = engine.repair_config()?;
    let bundle = costfix::load_bundle(bundle_dir)?;
    let store = Store::open(&engine.cache, engine.mode)?;
    let outcome = run_one(&bundle, engine, &config, &store)?;
    let path = write_outcome(&engine.out, &outcome)?;
    eprintln!("{}", describe(&outcome));
    eprintln!("outcome written to {}", path.display());
    if engine.json {
        println!(
            "{}",
            serde_json::to_string(&BugRow::from_outcome(&outcome))?
        );
    }
    Ok(exit_for(outcome.terminal_state))
}

fn cmd_replay(bundle_dir: &Path, engine: &EngineArgs) -> Result<ExitCode> {
    let engine = EngineArgs {
        mode: CacheMode::Replay,
        ..engine.clone()
    };
    let config = engine.repair_config()?;
    let bundle = costfix::load_bundle(bundle_dir)?;
    let store = Store::open(&engine.cache, CacheMode::Replay)?;
    let outcome = run_one(&bundle, &engine, &config, &store)?;
    let path = outcome_path(&engine.out, &outcome.bug_id);
    let fresh = outcome_bytes(&outcome)?;
    match std::fs::read(&path) {
        Ok(previous) if previous == fresh => {
            eprintln!("replay matches {}", path.display());
        }
        Ok(_) => bail!("replayed outcome differs from {}", path.display()),
        Err(_) => {
            write_outcome(&engine.out, &outcome)?;
            eprintln!("no earlier outcome; replay written to {}", path.display());
        }
    }
    eprintln!("{}", describe(&outcome));
    if engine.json {
        println!(
            "{}",
            serde_json::to_string(&BugRow::from_outcome(&outcome))?
        );
    }
    Ok(exit_for(outcome.terminal_state))
}

fn read_baseline(path: Option<&PathBuf>) -> Result<Option<Vec<report::BaselineRow>>> {
    path.map(|p| {
        report::read_baseline(p).with_context(|| format!("reading baseline {}", p.display()))
    })
    .transpose()
}

fn emit_report(report: &report::Report, json: bool) -> Result<()> {
    eprint!("{}", report.cost.render());
    if let Some(o) = &report.overlap {
        eprintln!(
            "fixed only by us: {}, only by baseline: {}, both: {}, neither: {}",
            o.only_ours, o.only_theirs, o.both, o.neither
        );
    }
    if json {
        println!("{}", serde_json::to_string(report)?);
    }
    Ok(())
}

/// A finished bug, or its id and error text.
type BugResult = Result<RepairOutcome, (String, String)>;

fn cmd_batch(
    corpus: &Path,
    engine: &EngineArgs,
    parallel: usize,
    baseline: Option<&PathBuf>,
) -> Result<ExitCode> {
    let config = engine.repair_config()?;
    let baseline = read_baseline(baseline)?;
    let dirs = costfix::bundle::discover(corpus)?;
    if dirs.is_empty() {
        bail!("no bundles found in {}", corpus.display());
    }
    let store = Store::open(&engine.cache, engine.mode)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, BugResult)>> = Mutex::new(Vec::new());
    let workers = parallel.clamp(1, dirs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(dir) = dirs.get(i) else { break };
                let fallback_id = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let result = costfix::load_bundle(dir)
                    .map_err(anyhow::Error::from)
                    .and_then(|b| run_one(&b, engine, &config, &store))
                    .map_err(|e| (fallback_id, format!("{e:#}")));
                results.lock().expect("results").push((i, result));
            });
        }
    });
    let mut results = results.into_inner().expect("results");
    results.sort_by_key(|(i, _)| *i);

    let mut outcomes = Vec::new();
    let mut failed = Vec::new();
    for (_, result) in results {
        match result {
            Ok(outcome) => {
                write_outcome(&engine.out, &outcome)?;
                eprintln!("{}", describe(&outcome));
                outcomes.push(outcome);
            }
            Err((bug, message)) => {
                eprintln!("{bug}: error: {message}");
                failed.push(BugRow::failed(&bug, &message));
            }
        }
    }
    let report = report::write_report(&engine.out, &outcomes, &failed, baseline.as_deref())?;
    emit_report(&report, engine.json)?;
    Ok(if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn load_outcomes(dir: &Path) -> Result<Vec<RepairOutcome>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(OUTCOME_SUFFIX))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

fn cmd_report(
    dir: &Path,
    baseline: Option<&PathBuf>,
    out: Option<&PathBuf>,
    json: bool,
) -> Result<ExitCode> {
    let outcomes = load_outcomes(dir)?;
    if outcomes.is_empty() {
        bail!("no outcomes in {}", dir.display());
    }
    let baseline = read_baseline(baseline)?;
    let out = out.map(PathBuf::as_path).unwrap_or(dir);
    let report = report::write_report(out, &outcomes, &[], baseline.as_deref())?;
    emit_report(&report, json)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Repair { bundle, engine } => cmd_repair(bundle, engine),
        Command::Replay { bundle, engine } => cmd_replay(bundle, engine),
        Command::Batch {
            corpus,
            engine,
            parallel,
            baseline,
        } => cmd_batch(corpus, engine, *parallel, baseline.as_ref()),
        Command::Report {
            outcome_dir,
            baseline,
            out,
            json,
        } => cmd_report(outcome_dir, baseline.as_ref(), out.as_ref(), *json),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
