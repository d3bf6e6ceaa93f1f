//! `whatif`: extraction, merging, counterfactuals, evaluation, Cladder runs
//! and the HTTP service from one binary.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

mod pretty;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use whatif_core::cladder::{self, BenchmarkMode, BenchmarkOptions};
use whatif_core::counterfactual::{
    propose_counterfactual_value, run_counterfactual, CounterfactualOptions, CounterfactualRun, RunOutcome,
};
use whatif_core::evaluation::{graph_distance, self_evaluate, EvalKind, EvalReport};
use whatif_core::extraction::{build_graph, extract_graph, BuildError, ExtractionOptions};
use whatif_core::graph::GraphDocument;
use whatif_core::llm::config::{ConfigError, ConfigFile};
use whatif_core::llm::ProviderConfig;
use whatif_core::merge::{merge_graphs, MergeOptions, Strategy};
use whatif_core::{fixtures, CausalGraph, Gateway, Intervention, WorldState};

#[derive(Debug, Parser)]
#[command(name = "whatif", version, about = "Causal graph extraction and counterfactual reasoning with language models")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Provider profile or kind (mock, openai, local).
    #[arg(long, global = true)]
    provider: Option<String>,
    /// TOML config file with provider profiles [env: WHATIF_CONFIG].
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// JSON script for the mock provider.
    #[arg(long, global = true)]
    script: Option<PathBuf>,
    /// Seed for the mock provider and for query sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Append every model call to this JSONL file.
    #[arg(long, global = true)]
    transcript: Option<PathBuf>,
    /// Emit JSON on stdout (the default).
    #[arg(long, global = true, conflicts_with = "pretty")]
    json: bool,
    /// Emit human-readable tables instead of JSON.
    #[arg(long, global = true)]
    pretty: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract a causal graph from a text document.
    Extract {
        #[arg(long)]
        input: PathBuf,
        /// Graph file; run metadata goes next to it as `<stem>.meta.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Reject edges that name unknown nodes instead of dropping them.
        #[arg(long)]
        strict: bool,
    },
    /// Merge several graphs by clustering their node embeddings.
    Merge {
        #[arg(long, default_value = "summarise")]
        strategy: Strategy,
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.15)]
        epsilon: f64,
        #[arg(long, default_value_t = 1)]
        min_points: usize,
        #[arg(long, default_value_t = 1)]
        depth: usize,
        /// Also embed and cluster hidden nodes.
        #[arg(long)]
        include_hidden: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer a what-if question by abduction, intervention and prediction.
    Counterfactual {
        #[arg(long)]
        graph: PathBuf,
        /// Intervention `NODE=VALUE`; repeatable.
        #[arg(long = "do", value_name = "NODE=VALUE", required = true)]
        assignments: Vec<String>,
        /// Stop at the first failed prediction.
        #[arg(long)]
        strict: bool,
        /// Samples per prediction (majority vote).
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ask the model for a counterfactual value of one node.
    Suggest {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        node: String,
    },
    /// Self-evaluate a graph and/or compare it with a reference graph.
    Evaluate {
        #[arg(long)]
        graph: PathBuf,
        /// Reference graph for edit distances.
        #[arg(long)]
        against: Option<PathBuf>,
        /// Ask the model to score plausibility.
        #[arg(long = "self")]
        self_eval: bool,
        /// Which world of `--run` to score.
        #[arg(long, default_value = "factual")]
        kind: EvalKind,
        /// Counterfactual run file produced by `counterfactual --out`.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Run counterfactual Cladder queries and report accuracy.
    CladderRun {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "ggt")]
        mode: BenchmarkMode,
        /// Evaluate a reproducible random subset of this size.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cache per-query records here so interrupted runs resume.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// In ggt mode, extract graphs for contexts the parser rejects.
        #[arg(long)]
        route_unparsed: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Artifact store directory [env: WHATIF_STORE].
        #[arg(long)]
        store: Option<PathBuf>,
        /// Static bearer token [env: WHATIF_TOKEN].
        #[arg(long)]
        token: Option<String>,
        /// Allowed browser origin (default: any).
        #[arg(long)]
        cors_origin: Option<String>,
        /// Run extraction inside the request instead of as a background job.
        #[arg(long)]
        sync_jobs: bool,
    },
    /// Write the worked-example article and a mock script replaying it.
    Example {
        #[arg(long, default_value = ".")]
        dir: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Domain(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Domain(e)
    }
}

type Outcome = Result<bool, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.global.verbose);
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try 'whatif --help'.");
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            if cli.global.json {
                let _ = stdout(&format!("{}\n", json!({ "error": format!("{e:#}") })));
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
}

fn run(cli: &Cli) -> Outcome {
    let g = &cli.global;
    match &cli.command {
        Command::Extract { input, out, strict } => extract(g, input, out.as_deref(), *strict),
        Command::Merge { strategy, inputs, epsilon, min_points, depth, include_hidden, out } => {
            let options = MergeOptions {
                strategy: *strategy,
                epsilon: *epsilon,
                min_points: *min_points,
                depth: *depth,
                include_hidden: *include_hidden,
            };
            merge(g, inputs, options, out.as_deref())
        }
        Command::Counterfactual { graph, assignments, strict, samples, out } => {
            let iv = Intervention::parse_pairs(assignments.iter().map(String::as_str)).map_err(Failure::Usage)?;
            if *samples == 0 {
                return Err(Failure::Usage("--samples must be at least 1".into()));
            }
            counterfactual(g, graph, iv, CounterfactualOptions { strict: *strict, samples: *samples }, out.as_deref())
        }
        Command::Suggest { graph, node } => suggest(g, graph, node),
        Command::Evaluate { graph, against, self_eval, kind, run } => {
            if !self_eval && against.is_none() {
                return Err(Failure::Usage("nothing to evaluate: pass --self and/or --against".into()));
            }
            evaluate(g, graph, against.as_deref(), *self_eval, *kind, run.as_deref())
        }
        Command::CladderRun { data, mode, sample, out, cache, route_unparsed } => {
            let options = BenchmarkOptions {
                mode: *mode,
                route_unparsed_to_discovery: *route_unparsed,
                cache_dir: cache.clone(),
                ..BenchmarkOptions::default()
            };
            cladder_run(g, data, options, *sample, out.as_deref())
        }
        Command::Serve { listen, store, token, cors_origin, sync_jobs } => {
            let env = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
            let config = whatif_service::ServiceConfig {
                listen: *listen,
                store_root: store.clone().or_else(|| env("WHATIF_STORE").map(PathBuf::from)).unwrap_or_else(|| "whatif-store".into()),
                token: token.clone().or_else(|| env("WHATIF_TOKEN")),
                cors_origin: cors_origin.clone(),
                sync_jobs: *sync_jobs,
            };
            serve(g, config)
        }
        Command::Example { dir } => example(g, dir),
    }
}

fn gateway(g: &Global) -> Result<Gateway, Failure> {
    let config_path = g.config.clone().or_else(|| std::env::var_os("WHATIF_CONFIG").map(PathBuf::from));
    let file = match &config_path {
        Some(p) => Some(ConfigFile::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let mut cfg = ProviderConfig::resolve(file.as_ref(), g.provider.as_deref(), |k| std::env::var(k).ok())
        .map_err(|e| match e {
            ConfigError::UnknownProvider(_) => Failure::Usage(e.to_string()),
            other => Failure::Domain(other.into()),
        })?;
    if let Some(script) = &g.script {
        cfg.mock_script = Some(script.clone());
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(t) = &g.transcript {
        cfg.transcript = Some(t.clone());
    }
    Ok(cfg.build_gateway().context("building provider")?)
}

fn emit<T: Serialize>(g: &Global, value: &T, pretty: impl FnOnce(&T) -> String) -> anyhow::Result<()> {
    let text = if g.pretty { pretty(value) } else { serde_json::to_string_pretty(value)? + "\n" };
    stdout(&text)
}

/// Writes to stdout; a reader that went away (`| head`) is not an error.
fn stdout(text: &str) -> anyhow::Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("graph");
    path.with_file_name(format!("{stem}.meta.json"))
}

/// Reads a graph document, or a service envelope with a `graph` field.
fn load_graph(path: &Path) -> anyhow::Result<CausalGraph> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut value: Value = serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
    if let Some(inner) = value.get_mut("graph").map(Value::take) {
        value = inner;
    }
    let doc: GraphDocument =
        serde_json::from_value(value).with_context(|| format!("{} is not a graph document", path.display()))?;
    build_graph(doc, true).map(|b| b.graph).map_err(|e| match e {
        BuildError::Invalid(v) => {
            let list: Vec<String> = v.iter().map(|v| format!("{v:?}")).collect();
            anyhow!("{} is not a valid graph: {}", path.display(), list.join("; "))
        }
        other => anyhow!("{}: {other}", path.display()),
    })
}

fn extract(g: &Global, input: &Path, out: Option<&Path>, strict: bool) -> Outcome {
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let gw = gateway(g)?;
    let run = extract_graph(&gw, &text, ExtractionOptions { strict }).context("extraction failed")?;
    let ok = run.outcome.is_ok();
    let mut summary = json!({
        "doc_id": run.doc_id,
        "outcome": run.outcome,
        "warnings": run.warnings,
        "violations": run.violations,
        "error": run.error,
    });
    if let Some(graph) = &run.graph {
        summary["graph_id"] = json!(graph.graph_id());
        summary["nodes"] = json!(graph.nodes().len());
        summary["hidden"] = json!(graph.hidden_nodes().count());
        summary["edges"] = json!(graph.edges().len());
    }
    match out {
        Some(path) => {
            let meta = sidecar(path);
            if let Some(graph) = &run.graph {
                write_file(path, &graph.to_json())?;
                summary["out"] = json!(path);
            }
            write_file(&meta, &serde_json::to_string_pretty(&run).map_err(anyhow::Error::from)?)?;
            summary["metadata"] = json!(meta);
        }
        None => {
            if let Some(graph) = &run.graph {
                summary["graph"] = serde_json::from_str(&graph.to_json()).map_err(anyhow::Error::from)?;
            }
        }
    }
    emit(g, &summary, pretty::extraction)?;
    Ok(ok)
}

fn merge(g: &Global, inputs: &[PathBuf], options: MergeOptions, out: Option<&Path>) -> Outcome {
    let graphs = inputs.iter().map(|p| load_graph(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let gw = gateway(g)?;
    let report = merge_graphs(&gw, &graphs, options).context("merge failed")?;
    let merged = &report.result.graph;
    let mut summary = json!({
        "graph_id": merged.graph_id(),
        "strategy": options.strategy,
        "nodes": merged.nodes().len(),
        "hidden": merged.hidden_nodes().count(),
        "edges": merged.edges().len(),
        "clusters": report.clustering.clusters.len(),
        "multi_member_clusters": report.clustering.clusters.iter().filter(|c| c.members.len() > 1).count(),
        "dropped_edges": report.result.dropped_edges.len(),
        "log": report.result.log,
    });
    match out {
        Some(path) => {
            write_file(path, &merged.to_json())?;
            let meta = sidecar(path);
            write_file(&meta, &serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?)?;
            summary["out"] = json!(path);
            summary["metadata"] = json!(meta);
        }
        None => summary["graph"] = serde_json::from_str(&merged.to_json()).map_err(anyhow::Error::from)?,
    }
    emit(g, &summary, pretty::merge)?;
    Ok(true)
}

#[derive(Serialize, serde::Deserialize)]
struct RunFile {
    graph_id: String,
    options: CounterfactualOptions,
    run: CounterfactualRun,
}

fn counterfactual(g: &Global, graph: &Path, iv: Intervention, options: CounterfactualOptions, out: Option<&Path>) -> Outcome {
    let graph = load_graph(graph)?;
    let unknown: Vec<&str> = iv.assignments.keys().filter(|id| !graph.contains(id)).map(String::as_str).collect();
    if !unknown.is_empty() {
        return Err(Failure::Domain(anyhow!("unknown node(s) in --do: {}", unknown.join(", "))));
    }
    let gw = gateway(g)?;
    let world = WorldState::from_graph(graph);
    let run = run_counterfactual(&gw, &world, &iv, options).context("counterfactual failed")?;
    let ok = run.outcome == RunOutcome::Ok;
    let record = RunFile { graph_id: world.graph.graph_id().to_string(), options, run };
    if let Some(path) = out {
        write_file(path, &serde_json::to_string_pretty(&record).map_err(anyhow::Error::from)?)?;
    }
    emit(g, &record, |r| pretty::counterfactual(&r.run))?;
    Ok(ok)
}

fn suggest(g: &Global, graph: &Path, node: &str) -> Outcome {
    let graph = load_graph(graph)?;
    let gw = gateway(g)?;
    let proposal = propose_counterfactual_value(&gw, &WorldState::from_graph(graph), node)?;
    emit(g, &proposal, |p| {
        format!("{}: {} -> {}\n{}\n", p.node_id, p.factual_value, p.proposed_value, p.explanation)
    })?;
    Ok(true)
}

fn evaluate(g: &Global, graph: &Path, against: Option<&Path>, self_eval: bool, kind: EvalKind, run: Option<&Path>) -> Outcome {
    let graph = load_graph(graph)?;
    let mut report = EvalReport::new(graph.graph_id());
    if let Some(reference) = against {
        report.distance = Some(graph_distance(&graph, &load_graph(reference)?));
    }
    if self_eval {
        let world = match run {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let file: RunFile =
                    serde_json::from_str(&text).with_context(|| format!("{} is not a run file", path.display()))?;
                match kind {
                    EvalKind::Factual => file.run.factual,
                    EvalKind::Counterfactual => file.run.counterfactual,
                }
            }
            None if kind == EvalKind::Counterfactual => {
                return Err(Failure::Usage("--kind counterfactual needs --run".into()));
            }
            None => WorldState::from_graph(graph),
        };
        let gw = gateway(g)?;
        let (plausibility, _) = self_evaluate(&gw, &world, kind).context("self-evaluation failed")?;
        report.plausibility.push(plausibility);
    }
    emit(g, &report, pretty::evaluation)?;
    Ok(true)
}

fn cladder_run(g: &Global, data: &Path, options: BenchmarkOptions, sample: Option<usize>, out: Option<&Path>) -> Outcome {
    let dataset = cladder::load_dataset(data)?;
    for s in &dataset.skipped {
        log::warn!("skipped record {}: {}", s.index, s.reason);
    }
    if dataset.queries.is_empty() {
        return Err(Failure::Domain(anyhow!("{} has no counterfactual queries", data.display())));
    }
    let queries = match sample {
        Some(n) => cladder::sample_queries(&dataset.queries, n, g.seed.unwrap_or(0)),
        None => dataset.queries,
    };
    let gw = gateway(g)?;
    let report = cladder::run_benchmark(&gw, &queries, &options);
    if let Some(path) = out {
        write_file(path, &serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?)?;
    }
    let mut summary = serde_json::to_value(&report).map_err(anyhow::Error::from)?;
    if let Some(obj) = summary.as_object_mut() {
        obj.remove("records");
        obj.insert("skipped".into(), json!(dataset.skipped.len()));
        obj.insert("excluded".into(), json!(dataset.excluded));
    }
    emit(g, &summary, |_| pretty::benchmark(&report))?;
    Ok(true)
}

fn serve(g: &Global, config: whatif_service::ServiceConfig) -> Outcome {
    let gw = gateway(g)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting runtime")?;
    eprintln!("serving on http://{} (store: {})", config.listen, config.store_root.display());
    runtime.block_on(whatif_service::serve(config, gw)).context("server stopped")?;
    Ok(true)
}

fn example(g: &Global, dir: &Path) -> Outcome {
    let article = dir.join("article.txt");
    let script = dir.join("mock-script.json");
    write_file(&article, fixtures::BURSA_ARTICLE)?;
    let text = serde_json::to_string_pretty(&fixtures::bursa_replay_script()).map_err(anyhow::Error::from)?;
    write_file(&script, &text)?;
    if g.seed.is_some() {
        log::info!("--seed has no effect on example files");
    }
    emit(g, &json!({ "article": article, "script": script }), |v| format!("{}\n{}\n", v["article"], v["script"]))?;
    Ok(true)
}

impl From<whatif_core::counterfactual::InferenceError> for Failure {
    fn from(e: whatif_core::counterfactual::InferenceError) -> Self {
        Failure::Domain(e.into())
    }
}

impl From<cladder::DatasetError> for Failure {
    fn from(e: cladder::DatasetError) -> Self {
        Failure::Domain(e.into())
    }
}
