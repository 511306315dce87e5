//! `ddxgraph` — command-line front end for the diagnosis, training,
//! benchmark-construction, and evaluation pipelines.
//!
//! One TOML config file drives everything; a handful of flags override it
//! (flags win). Every command prints the artifacts it wrote as `artifact:`
//! lines and exits 0 on success, 1 on runtime failure, 2 on usage or config
//! errors — the latter two after a single machine-readable `error:` line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, Context};
use clap::{CommandFactory, Parser, Subcommand};

use ddxgraph_core::config::RunConfig;
use ddxgraph_core::evaluation::{
    assemble_report, classify_failure_mode, emit_report, load_predictions, score_pairs,
    tally_failure_modes, FailureMode, MetricsReport, PairOutcome, PairPrediction, PairResult,
};
use ddxgraph_core::memory::{ExemplarStore, IllnessGraphStore};
use ddxgraph_core::providers::{
    FixtureBundle, Generator, KnowledgeSource, RemoteEmbedder,
    RemoteGenerator, RemoteKnowledge,
};
use ddxgraph_core::reasoner::{DiagnosisAgent, MemoryView};
use ddxgraph_core::{load_pairs, load_train_cases, CounterfactualPair, Embedder, Evolver};

#[derive(Parser)]
#[command(
    name = "ddxgraph",
    version,
    about = "Evidence-graph differential diagnosis: build benchmarks, train memory, diagnose, evaluate"
)]
struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Force the deterministic offline mock stack.
    #[arg(long, global = true)]
    mock: bool,
    /// Override the run seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Bound concurrent case pipelines (default: machine parallelism).
    #[arg(long, global = true, value_name = "N")]
    parallel: Option<usize>,
    /// Override the output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Print the effective configuration (file + flag overrides) and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the counterfactual pair benchmark from a source dataset.
    BuildBench {
        /// Source cases, one JSON object per line.
        source: PathBuf,
        /// Resume journal (default: <out>/bench/journal.jsonl).
        #[arg(long, value_name = "FILE")]
        journal: Option<PathBuf>,
    },
    /// Run the memory-evolution training loop over labeled cases.
    Evolve {
        /// Training cases, one JSON object per line (case_id, narrative, truth).
        cases: PathBuf,
        /// Resume journal (default: <out>/evolve/journal.jsonl).
        #[arg(long, value_name = "FILE")]
        journal: Option<PathBuf>,
    },
    /// Diagnose a single narrative (text file) or a batch (JSONL).
    Diagnose {
        /// Narrative text file, or JSONL batch with case_id + narrative fields.
        input: PathBuf,
        /// Treat the input as one plain-text narrative under this case id.
        #[arg(long, value_name = "ID")]
        case_id: Option<String>,
    },
    /// Score a model over a benchmark pair file and emit the metrics report.
    Evaluate {
        /// Benchmark pairs, one JSON object per line.
        pairs: PathBuf,
        /// Pre-computed predictions (JSONL: pair_id, pred_control,
        /// pred_trap). When omitted the configured agent produces them.
        #[arg(long, value_name = "FILE")]
        predictions: Option<PathBuf>,
        /// Model display name recorded in the report.
        #[arg(long, default_value = "ddxgraph-agent", value_name = "NAME")]
        model: String,
    },
    /// Re-emit the report files from saved per-pair results.
    Report {
        /// Scored results as written by `evaluate` (results.jsonl).
        results: PathBuf,
        /// Failure-mode histogram as written by `evaluate` (optional).
        #[arg(long, value_name = "FILE")]
        failure_modes: Option<PathBuf>,
        /// Model display name recorded in the report.
        #[arg(long, default_value = "ddxgraph-agent", value_name = "NAME")]
        model: String,
    },
}

/// Process-level failure classes, mapped to exit codes.
enum Failure {
    /// Bad configuration or usage: exit 2.
    Config { key: String, message: String },
    /// Everything else: exit 1.
    Runtime(anyhow::Error),
}

impl From<ddxgraph_core::ConfigError> for Failure {
    fn from(e: ddxgraph_core::ConfigError) -> Self {
        Failure::Config { key: e.key, message: e.message }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("DDXGRAPH_LOG")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config { key, message }) => {
            eprintln!(
                "error: {}",
                serde_json::json!({"kind": "config", "key": key, "message": message})
            );
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!(
                "error: {}",
                serde_json::json!({"kind": "runtime", "message": format!("{e:#}")})
            );
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = effective_config(&cli)?;
    if cli.dump_config {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        // No subcommand and nothing to dump: usage error.
        Cli::command().print_help().ok();
        return Err(Failure::Config {
            key: "(usage)".into(),
            message: "a subcommand is required (see --help)".into(),
        });
    };
    let parallel = cli
        .parallel
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let seed = config.provider.seed;

    match command {
        Command::BuildBench { source, journal } => {
            let out_dir = config.output_dir.join("bench");
            fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let journal = journal.unwrap_or_else(|| out_dir.join("journal.jsonl"));
            let forge = build_forge(&config)?.with_parallel(parallel);
            let stats = forge
                .build_benchmark(&source, &out_dir, seed, Some(&journal))
                .map_err(|e| anyhow!(e))?;
            println!(
                "build-bench: {} source cases, {} hard candidates, {} accepted, {} rejected, {} failed ({} skipped via journal)",
                stats.report.source_cases,
                stats.report.hard_candidates,
                stats.report.accepted,
                stats.report.rejected,
                stats.report.failed,
                stats.skipped,
            );
            for name in ["pairs.jsonl", "rejects.jsonl", "report.json", "report.csv"] {
                println!("artifact: {}", out_dir.join(name).display());
            }
            println!("artifact: {}", journal.display());
        }
        Command::Evolve { cases, journal } => {
            let out_dir = config.output_dir.join("evolve");
            fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let journal = journal.unwrap_or_else(|| out_dir.join("journal.jsonl"));
            let agent = build_agent(&config)?;
            let graphs = open_graph_store(&config)?;
            let mut exemplars = open_exemplar_store(&config, agent.embedder())?;
            let train_cases = load_train_cases(&cases).map_err(|e| anyhow!(e))?;
            let trace_dir = out_dir.join("traces");
            let mut evolver =
                Evolver::new(&agent, &graphs, &mut exemplars, config.evolution_config())
                    .map_err(|e| anyhow!(e))?
                    .with_trace_dir(&trace_dir);
            let stats =
                evolver.evolve(&train_cases, seed, Some(&journal)).map_err(|e| anyhow!(e))?;
            println!(
                "evolve: processed={} success={} discarded={} failed={} skipped={}",
                stats.processed, stats.success, stats.discarded, stats.failed, stats.skipped,
            );
            println!("artifact: {}", config.stores.exemplars.display());
            println!("artifact: {}", config.stores.illness_graphs.display());
            println!("artifact: {}", trace_dir.display());
            println!("artifact: {}", journal.display());
        }
        Command::Diagnose { input, case_id } => {
            run_diagnose(&config, &input, case_id, parallel, seed)?;
        }
        Command::Evaluate { pairs, predictions, model } => {
            run_evaluate(&config, &pairs, predictions.as_deref(), &model, parallel, seed)?;
        }
        Command::Report { results, failure_modes, model } => {
            let raw = fs::read_to_string(&results)
                .with_context(|| format!("reading {}", results.display()))?;
            let mut scored = Vec::new();
            for (lineno, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let result: PairResult = serde_json::from_str(line)
                    .with_context(|| format!("{}:{}", results.display(), lineno + 1))?;
                scored.push(result);
            }
            let modes: BTreeMap<String, u64> = match failure_modes {
                Some(path) => {
                    let raw = fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&raw)
                        .with_context(|| format!("parsing {}", path.display()))?
                }
                None => BTreeMap::new(),
            };
            let report = assemble_report(&model, &scored, modes).map_err(|e| anyhow!(e))?;
            let out_dir = config.output_dir.join("eval");
            emit_and_announce(&report, &out_dir)?;
        }
    }
    Ok(())
}

/// File config (or defaults) with flag overrides applied, then validated.
fn effective_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.mock {
        config.provider.mock = true;
    }
    if let Some(seed) = cli.seed {
        config.provider.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    // Relative store paths live under the output directory so a run never
    // scatters state into whatever directory the command happened to start in.
    if config.stores.exemplars.is_relative() {
        config.stores.exemplars = config.output_dir.join(&config.stores.exemplars);
    }
    if config.stores.illness_graphs.is_relative() {
        config.stores.illness_graphs = config.output_dir.join(&config.stores.illness_graphs);
    }
    config.check()?;
    Ok(config)
}

fn fixture_bundle() -> Arc<FixtureBundle> {
    Arc::new(FixtureBundle::builtin())
}

fn build_agent(config: &RunConfig) -> Result<DiagnosisAgent, Failure> {
    let p = &config.provider;
    let agent = if p.mock {
        DiagnosisAgent::mock(fixture_bundle(), p.seed)
    } else {
        let api_key = read_api_key(&p.api_key_env)?;
        let generator = RemoteGenerator::new(
            p.generation_endpoint.clone(),
            p.model.clone(),
            api_key.clone(),
            0.0,
            p.timeout_secs,
        )
        .map_err(|e| anyhow!(e))?;
        let embedder = RemoteEmbedder::new(
            p.embedding_endpoint.clone(),
            p.embed_model.clone(),
            api_key,
            ddxgraph_core::embed::DEFAULT_EMBED_DIM,
            p.timeout_secs,
        )
        .map_err(|e| anyhow!(e))?;
        let knowledge = RemoteKnowledge::new(p.knowledge_endpoint.clone(), p.timeout_secs)
            .map_err(|e| anyhow!(e))?;
        DiagnosisAgent::new(
            Arc::new(ddxgraph_core::providers::Gateway::new(generator)),
            Arc::new(knowledge),
            Arc::new(embedder),
        )
    };
    Ok(agent
        .with_weights(config.score_weights())
        .with_tau(config.reasoner.tau)
        .with_intuition_k(config.reasoner.candidates)
        .with_exemplar_k(config.reasoner.retrieval))
}

fn build_forge(config: &RunConfig) -> Result<ddxgraph_core::BenchForge, Failure> {
    let p = &config.provider;
    let forge = if p.mock {
        ddxgraph_core::BenchForge::mock(fixture_bundle(), p.seed)
    } else {
        let api_key = read_api_key(&p.api_key_env)?;
        let make = |_j: usize| -> Result<Arc<dyn Generator>, Failure> {
            let backend = RemoteGenerator::new(
                p.generation_endpoint.clone(),
                p.model.clone(),
                api_key.clone(),
                0.0,
                p.timeout_secs,
            )
            .map_err(|e| anyhow!(e))?;
            Ok(Arc::new(ddxgraph_core::providers::Gateway::new(backend)))
        };
        let judges = (0..3).map(make).collect::<Result<Vec<_>, _>>()?;
        let knowledge: Arc<dyn KnowledgeSource> = Arc::new(
            RemoteKnowledge::new(p.knowledge_endpoint.clone(), p.timeout_secs)
                .map_err(|e| anyhow!(e))?,
        );
        ddxgraph_core::BenchForge::new(make(3)?, judges, knowledge, Vec::new())
            .map_err(|e| anyhow!(e))?
    };
    Ok(forge.with_epsilon(config.benchmark.epsilon))
}

fn read_api_key(env_name: &str) -> Result<Option<String>, Failure> {
    if env_name.is_empty() {
        return Ok(None);
    }
    match std::env::var(env_name) {
        Ok(key) => Ok(Some(key)),
        Err(_) => Err(Failure::Config {
            key: "provider.api_key_env".into(),
            message: format!("environment variable `{env_name}` is not set"),
        }),
    }
}

fn open_graph_store(config: &RunConfig) -> Result<IllnessGraphStore, Failure> {
    IllnessGraphStore::open(&config.stores.illness_graphs)
        .map_err(|e| Failure::Runtime(anyhow!(e)))
}

fn open_exemplar_store(
    config: &RunConfig,
    embedder: Arc<dyn Embedder>,
) -> Result<ExemplarStore, Failure> {
    if let Some(parent) = config.stores.exemplars.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))
            .map_err(Failure::Runtime)?;
    }
    ExemplarStore::open(&config.stores.exemplars, embedder)
        .map_err(|e| Failure::Runtime(anyhow!(e)))
}

/// Loads whatever stored memory exists on disk; absent stores mean the
/// amnesic agent.
struct LoadedMemory {
    graphs: Option<BTreeMap<String, ddxgraph_core::IllnessGraph>>,
    exemplars: Option<ExemplarStore>,
}

impl LoadedMemory {
    fn load(config: &RunConfig, embedder: Arc<dyn Embedder>) -> Result<Self, Failure> {
        let graphs = if config.stores.illness_graphs.is_dir() {
            let store = IllnessGraphStore::open(&config.stores.illness_graphs)
                .map_err(|e| anyhow!(e))?;
            Some(store.load_all_latest().map_err(|e| anyhow!(e))?)
        } else {
            None
        };
        let exemplars = if config.stores.exemplars.is_file() {
            Some(ExemplarStore::open(&config.stores.exemplars, embedder).map_err(|e| anyhow!(e))?)
        } else {
            None
        };
        Ok(LoadedMemory { graphs, exemplars })
    }

    fn view(&self) -> MemoryView<'_> {
        MemoryView { illness_graphs: self.graphs.as_ref(), exemplars: self.exemplars.as_ref() }
    }
}

#[derive(serde::Deserialize)]
struct BatchCase {
    case_id: String,
    narrative: String,
}

fn run_diagnose(
    config: &RunConfig,
    input: &Path,
    case_id: Option<String>,
    parallel: usize,
    seed: u64,
) -> Result<(), Failure> {
    let agent = build_agent(config)?;
    let memory = LoadedMemory::load(config, agent.embedder())?;
    let trace_dir = config.output_dir.join("traces");
    fs::create_dir_all(&trace_dir)
        .with_context(|| format!("creating {}", trace_dir.display()))?;

    let raw =
        fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let batch: Vec<BatchCase> = match case_id {
        Some(id) => vec![BatchCase { case_id: id, narrative: raw }],
        None if input.extension().is_some_and(|e| e == "jsonl") => {
            let mut cases = Vec::new();
            for (lineno, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let case: BatchCase = serde_json::from_str(line)
                    .with_context(|| format!("{}:{}", input.display(), lineno + 1))?;
                cases.push(case);
            }
            cases
        }
        None => {
            let stem = input.file_stem().map_or_else(
                || "case".to_string(),
                |s| s.to_string_lossy().into_owned(),
            );
            vec![BatchCase { case_id: stem, narrative: raw }]
        }
    };

    let view = memory.view();
    let traces = parallel_map(&batch, parallel, |case| {
        agent
            .diagnose(&case.case_id, &case.narrative, view, &[], seed)
            .map_err(|e| anyhow!("case `{}`: {e}", case.case_id))
    })?;
    for trace in &traces {
        let path = trace_dir.join(format!("{}.json", sanitize(&trace.case_id)));
        let body = serde_json::to_string_pretty(trace).expect("traces serialize");
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        println!("{}: {}", trace.case_id, trace.diagnosis());
        println!("artifact: {}", path.display());
    }
    Ok(())
}

fn run_evaluate(
    config: &RunConfig,
    pairs_path: &Path,
    predictions_path: Option<&Path>,
    model: &str,
    parallel: usize,
    seed: u64,
) -> Result<(), Failure> {
    let pairs = load_pairs(pairs_path).map_err(|e| anyhow!(e))?;
    let out_dir = config.output_dir.join("eval");
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    // Predictions either come precomputed or from the configured agent; the
    // agent path also lets us triage trapped pairs from their traces.
    let (predictions, agent) = match predictions_path {
        Some(path) => (load_predictions(path).map_err(|e| anyhow!(e))?, None),
        None => {
            let agent = build_agent(config)?;
            let memory = LoadedMemory::load(config, agent.embedder())?;
            let view = memory.view();
            let predictions = parallel_map(&pairs, parallel, |pair| {
                let control = agent
                    .diagnose(&format!("{}-control", pair.pair_id), &pair.control, view, &[], seed)
                    .map_err(|e| anyhow!("pair `{}` control: {e}", pair.pair_id))?;
                let trap = agent
                    .diagnose(&format!("{}-trap", pair.pair_id), &pair.trap, view, &[], seed)
                    .map_err(|e| anyhow!("pair `{}` trap: {e}", pair.pair_id))?;
                Ok(PairPrediction {
                    pair_id: pair.pair_id.clone(),
                    pred_control: control.diagnosis().to_string(),
                    pred_trap: trap.diagnosis().to_string(),
                })
            })?;
            (predictions, Some(agent))
        }
    };

    let results = score_pairs(&pairs, &predictions).map_err(|e| anyhow!(e))?;

    // Failure-mode triage needs reasoning traces, so it only runs when the
    // agent produced the predictions; re-diagnosing a trap side is
    // deterministic and reproduces the trace the prediction came from.
    let failure_modes = match &agent {
        Some(agent) => {
            let memory = LoadedMemory::load(config, agent.embedder())?;
            let view = memory.view();
            let trapped: Vec<&CounterfactualPair> = pairs
                .iter()
                .zip(&results)
                .filter(|(_, r)| r.outcome == PairOutcome::Trapped)
                .map(|(p, _)| p)
                .collect();
            let modes: Vec<FailureMode> = parallel_map(&trapped, parallel, |pair| {
                let trace = agent
                    .diagnose(&format!("{}-trap", pair.pair_id), &pair.trap, view, &[], seed)
                    .map_err(|e| anyhow!("pair `{}` trap: {e}", pair.pair_id))?;
                Ok(classify_failure_mode(
                    &trace,
                    &pair.k_trap,
                    &pair.y_bias,
                    agent.generator().as_ref(),
                    seed,
                ))
            })?;
            tally_failure_modes(&modes)
        }
        None => BTreeMap::new(),
    };

    let report = assemble_report(model, &results, failure_modes).map_err(|e| anyhow!(e))?;

    let mut lines = String::new();
    for p in &predictions {
        lines.push_str(&serde_json::to_string(p).expect("predictions serialize"));
        lines.push('\n');
    }
    let predictions_path = out_dir.join("predictions.jsonl");
    fs::write(&predictions_path, lines)
        .with_context(|| format!("writing {}", predictions_path.display()))?;

    let mut lines = String::new();
    for r in &results {
        lines.push_str(&serde_json::to_string(r).expect("results serialize"));
        lines.push('\n');
    }
    let results_path = out_dir.join("results.jsonl");
    fs::write(&results_path, lines)
        .with_context(|| format!("writing {}", results_path.display()))?;

    let modes_path = out_dir.join("failure_modes.json");
    let mut body =
        serde_json::to_string_pretty(&report.failure_modes).expect("histogram serializes");
    body.push('\n');
    fs::write(&modes_path, body).with_context(|| format!("writing {}", modes_path.display()))?;

    println!("artifact: {}", predictions_path.display());
    println!("artifact: {}", results_path.display());
    println!("artifact: {}", modes_path.display());
    emit_and_announce(&report, &out_dir)?;
    Ok(())
}

fn emit_and_announce(report: &MetricsReport, out_dir: &Path) -> Result<(), Failure> {
    emit_report(report, out_dir).map_err(|e| anyhow!(e))?;
    let r_bias = report
        .overall
        .r_bias
        .map_or_else(|| "n/a".to_string(), |r| format!("{r:.4}"));
    println!(
        "evaluate[{}]: n={} acc_base={:.4} acc_rob={:.4} r_bias={r_bias}",
        report.model, report.overall.n_total, report.overall.acc_base, report.overall.acc_rob,
    );
    for name in ["metrics.json", "per_disease.csv", "failure_modes.csv"] {
        println!("artifact: {}", out_dir.join(name).display());
    }
    Ok(())
}

/// Applies `f` to every item on up to `workers` threads, returning results
/// in input order (the schedule never affects output). The first error by
/// input index wins.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R, anyhow::Error> + Sync,
) -> Result<Vec<R>, Failure> {
    let mut slots: Vec<Option<Result<R, anyhow::Error>>> = Vec::new();
    slots.resize_with(items.len(), || None);
    let slots = Mutex::new(slots);
    let cursor = AtomicUsize::new(0);
    let workers = workers.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let result = f(&items[i]);
                slots.lock().expect("worker panicked holding the lock")[i] = Some(result);
            });
        }
    });
    let mut out = Vec::with_capacity(items.len());
    for slot in slots.into_inner().expect("worker panicked holding the lock") {
        out.push(slot.expect("every index was scheduled").map_err(Failure::Runtime)?);
    }
    Ok(out)
}

fn sanitize(raw: &str) -> String {
    let mut out: String = raw
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect();
    if out.is_empty() {
        out.push_str("case");
    }
    out
}
