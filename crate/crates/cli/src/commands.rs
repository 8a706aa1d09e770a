use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use tracegraph::agent::{CaseSpec, ExploreConfig};
use tracegraph::attribution::{score, AttributionResult, ErrorType, Termination, Truth};
use tracegraph::explorer::run_attribution;
use tracegraph::faultsim::{
    case_from_graph, make_suite, parse_manifest, write_manifest, ObsTwinJudge, OmniscientJudge, SimConfig,
};
use tracegraph::graph::{ExecutionGraph, Severity};
use tracegraph::model::{Backend, HttpBackend, ScriptedBackend};
use tracegraph::obs::run_attribution_obs;
use tracegraph::persist::{self, DotOptions, PersistError, DOT_EXTENSION, TRACE_EXTENSION};
use tracegraph::reporter::{build_report, optimize_round, PromptRegistry, REPORT_BATCH_SIZE};

use crate::{AgentArgs, Method};

pub const EXIT_VIOLATION: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_BUDGET: u8 = 3;
pub const EXIT_RUN: u8 = 4;

pub const MANIFEST: &str = "manifest.tsv";
pub const RESULTS: &str = "results.json";
pub const SCORES: &str = "scores.json";

pub struct CliError {
    pub code: u8,
    pub message: String,
}

type CmdResult = Result<u8, CliError>;

fn io_err(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_IO,
        message: message.into(),
    }
}

fn run_err(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_RUN,
        message: message.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| io_err(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(format!("cannot write {}: {e}", path.display())))
}

fn load_graph(path: &Path) -> Result<ExecutionGraph, CliError> {
    persist::import(&read(path)?).map_err(|e| match e {
        PersistError::Validation { .. } => CliError {
            code: EXIT_VIOLATION,
            message: format!("{}: {e}", path.display()),
        },
        other => io_err(format!("{}: {other}", path.display())),
    })
}

fn to_json<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable");
    out.push(b'\n');
    out
}

pub fn validate(path: &Path) -> CmdResult {
    let graph = persist::parse(&read(path)?).map_err(|e| match e {
        PersistError::Validation { code, message } => CliError {
            code: EXIT_VIOLATION,
            message: format!("{code}: {message}"),
        },
        other => io_err(format!("{}: {other}", path.display())),
    })?;
    let report = graph.validate();
    for v in &report.violations {
        println!("{v}");
    }
    let errors = report
        .violations
        .iter()
        .filter(|v| v.severity == Severity::Error)
        .count();
    println!(
        "{}: {} error(s), {} warning(s)",
        path.display(),
        errors,
        report.violations.len() - errors
    );
    Ok(if errors > 0 { EXIT_VIOLATION } else { 0 })
}

pub fn viz(path: &Path, out: Option<&Path>, max_value_chars: usize) -> CmdResult {
    let graph = load_graph(path)?;
    let dot = persist::export_dot(&graph, DotOptions { max_value_chars });
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("graph");
        let stem = name.strip_suffix(TRACE_EXTENSION).unwrap_or(name);
        path.with_file_name(format!("{stem}{DOT_EXTENSION}"))
    });
    write(&target, &dot)?;
    println!("wrote {}", target.display());
    Ok(0)
}

fn explore_config(args: &AgentArgs) -> Result<ExploreConfig, CliError> {
    let prior_knowledge = match &args.prior_knowledge {
        Some(p) => Some(String::from_utf8_lossy(&read(p)?).into_owned()),
        None => None,
    };
    let config = ExploreConfig {
        n: args.n,
        t: args.t,
        max_iters: args.max_iters,
        temperature: args.temperature,
        seed_evidence: args.seed_evidence,
        prior_knowledge,
        search_limit: args.search_limit,
        ..ExploreConfig::default()
    };
    config.validate().map_err(|e| io_err(e.to_string()))?;
    Ok(config)
}

fn text_backend(spec: &str) -> Result<Box<dyn Backend>, CliError> {
    if let Some(path) = spec.strip_prefix("scripted:") {
        let b = ScriptedBackend::from_file(Path::new(path)).map_err(|e| io_err(e.to_string()))?;
        return Ok(Box::new(b));
    }
    if spec == "http" {
        return HttpBackend::from_env()
            .map(|b| Box::new(b) as Box<dyn Backend>)
            .map_err(|e| io_err(e.to_string()));
    }
    Err(io_err(format!(
        "unknown backend `{spec}`; expected omniscient, scripted:<file> or http"
    )))
}

fn agent_backend(
    spec: &str,
    method: Method,
    graph: &ExecutionGraph,
    truth: Option<Truth>,
) -> Result<Box<dyn Backend>, CliError> {
    match (spec, method) {
        ("omniscient", Method::Graph) => Ok(Box::new(OmniscientJudge::new(graph, truth))),
        ("omniscient", Method::Obs) => Ok(Box::new(ObsTwinJudge::new(graph, truth))),
        _ => text_backend(spec),
    }
}

fn case_of(graph: &ExecutionGraph) -> Result<(CaseSpec, Option<Truth>), CliError> {
    case_from_graph(graph).ok_or_else(|| io_err("trace carries no case description in its metadata"))
}

fn attribute_graph(graph: &ExecutionGraph, args: &AgentArgs) -> Result<AttributionResult, CliError> {
    let config = explore_config(args)?;
    let (case, truth) = case_of(graph)?;
    let backend = agent_backend(&args.backend, args.method, graph, truth)?;
    let run = match args.method {
        Method::Graph => run_attribution(graph, &case, backend.as_ref(), &config),
        Method::Obs => run_attribution_obs(graph, &case, backend.as_ref(), &config),
    };
    run.map_err(|e| run_err(format!("{}: {e}", case.case_id)))
}

pub fn attribute(path: &Path, args: &AgentArgs, out: Option<&Path>) -> CmdResult {
    let graph = load_graph(path)?;
    let result = attribute_graph(&graph, args)?;
    let json = to_json(&result);
    match out {
        Some(p) => write(p, &json)?,
        None => print!("{}", String::from_utf8_lossy(&json)),
    }
    Ok(match result.terminated_by {
        Termination::Report => 0,
        Termination::Budget => EXIT_BUDGET,
    })
}

fn parse_types(spec: &str) -> Result<Vec<(Option<ErrorType>, u32)>, CliError> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match s {
            "none" => Ok((None, 1)),
            other => other
                .parse::<ErrorType>()
                .map(|t| (Some(t), 1))
                .map_err(|e| io_err(e.to_string())),
        })
        .collect()
}

pub fn bench_generate(out: &Path, n: usize, seed: u64, types: &str, n_messages: usize) -> CmdResult {
    let mix = parse_types(types)?;
    if mix.is_empty() {
        return Err(io_err("no error types given"));
    }
    let template = SimConfig {
        n_messages,
        ..SimConfig::default()
    };
    let cases = make_suite(n, seed, &mix, &template).map_err(|e| io_err(e.to_string()))?;
    for c in &cases {
        let bytes = persist::export(&c.graph, true).map_err(|e| run_err(e.to_string()))?;
        write(&out.join(format!("{}{TRACE_EXTENSION}", c.case_id)), &bytes)?;
    }
    write(&out.join(MANIFEST), write_manifest(&cases).as_bytes())?;
    println!("wrote {} cases to {}", cases.len(), out.display());
    Ok(0)
}

fn manifest(suite: &Path) -> Result<Vec<tracegraph::faultsim::ManifestEntry>, CliError> {
    let text = String::from_utf8_lossy(&read(&suite.join(MANIFEST))?).into_owned();
    parse_manifest(&text).map_err(|e| io_err(e.to_string()))
}

fn trace_path(suite: &Path, case_id: &str) -> PathBuf {
    suite.join(format!("{case_id}{TRACE_EXTENSION}"))
}

fn load_results(dir: &Path) -> Result<Vec<AttributionResult>, CliError> {
    serde_json::from_slice(&read(&dir.join(RESULTS))?)
        .map_err(|e| io_err(format!("{}: {e}", dir.join(RESULTS).display())))
}

pub fn bench_run(suite: &Path, out: &Path, args: &AgentArgs, jobs: usize) -> CmdResult {
    let entries = manifest(suite)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| io_err(e.to_string()))?;
    let results: Vec<Result<AttributionResult, CliError>> = pool.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let graph = load_graph(&trace_path(suite, &e.case_id))?;
                attribute_graph(&graph, args)
            })
            .collect()
    });
    let mut results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    results.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    write(&out.join(RESULTS), &to_json(&results))?;
    let reported = results
        .iter()
        .filter(|r| r.terminated_by == Termination::Report)
        .count();
    println!(
        "{} case(s): {reported} reported, {} out of budget",
        results.len(),
        results.len() - reported
    );
    Ok(0)
}

pub fn bench_score(suite: &Path, results_dir: &Path) -> CmdResult {
    let truths: BTreeMap<String, Truth> = manifest(suite)?
        .into_iter()
        .filter_map(|e| Some((e.case_id, e.truth?)))
        .collect();
    let results: Vec<AttributionResult> = load_results(results_dir)?
        .into_iter()
        .filter(|r| truths.contains_key(&r.case_id))
        .collect();
    let scores = score(&results, &truths).map_err(|e| io_err(e.to_string()))?;
    println!(
        "{:>8} {:>8} {:>10} {:>8} {:>6}",
        "ETA", "OIA", "tokens(k)", "minutes", "cases"
    );
    println!(
        "{:>8.2} {:>8.2} {:>10.2} {:>8.2} {:>6}",
        scores.eta * 100.0,
        scores.oia * 100.0,
        scores.mean_tokens_k,
        scores.mean_minutes,
        scores.cases
    );
    write(&results_dir.join(SCORES), &to_json(&scores))?;
    Ok(0)
}

pub fn report(results_dir: &Path, backend: &str, exemplar: Option<&Path>, out: &Path) -> CmdResult {
    let results = load_results(results_dir)?;
    let backend = text_backend(backend)?;
    let exemplar = match exemplar {
        Some(p) => Some(String::from_utf8_lossy(&read(p)?).into_owned()),
        None => None,
    };
    let report = build_report(&results, backend.as_ref(), REPORT_BATCH_SIZE, exemplar.as_deref());
    write(out, report.body.as_bytes())?;
    println!("{} revision(s) over {} result(s)", report.revision, results.len());
    match report.error {
        Some(e) => Err(run_err(format!("report incomplete: {e}"))),
        None => Ok(0),
    }
}

pub fn optimize(suite: &Path, results_dir: &Path, registry_path: &Path, backend: &str, out: &Path) -> CmdResult {
    let original = read(registry_path)?;
    let registry = PromptRegistry::from_json(&original).map_err(|e| io_err(e.to_string()))?;
    let failed: Vec<AttributionResult> = load_results(results_dir)?
        .into_iter()
        .filter(|r| r.terminated_by == Termination::Report)
        .collect();
    let mut graphs = BTreeMap::new();
    for r in &failed {
        graphs.insert(r.case_id.clone(), load_graph(&trace_path(suite, &r.case_id))?);
    }
    let refs: BTreeMap<String, &ExecutionGraph> = graphs.iter().map(|(k, g)| (k.clone(), g)).collect();
    let backend = text_backend(backend)?;
    let (next, summary) =
        optimize_round(&failed, &refs, &registry, backend.as_ref()).map_err(|e| run_err(e.to_string()))?;
    let bytes = if next == registry { original } else { next.to_json() };
    write(out, &bytes)?;
    println!(
        "{} feedback item(s), {} prompt(s) rewritten",
        summary.feedback.len(),
        summary.rewritten.len()
    );
    Ok(0)
}
