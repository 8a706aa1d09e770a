mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Execution-graph tracing and failure attribution.
#[derive(Parser)]
#[command(name = "tracegraph", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a trace file; exit 0 when valid, 1 on violations, 2 when unreadable.
    Validate { path: PathBuf },
    /// Render a trace file as Graphviz DOT.
    Viz {
        path: PathBuf,
        /// Output file; defaults to the input with a .dot extension.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        max_value_chars: usize,
    },
    /// Attribute one failed case; exit 0 on a report, 3 when the budget runs out.
    Attribute {
        path: PathBuf,
        #[command(flatten)]
        agent: AgentArgs,
        /// Result JSON path; printed to stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Synthetic benchmark suites.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Build a diagnostic report from a results directory.
    Report {
        /// Directory holding results.json.
        results: PathBuf,
        /// `scripted:<file>` or `http`.
        #[arg(long)]
        backend: String,
        #[arg(long)]
        exemplar: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run one prompt-optimization round over the failed cases of a run.
    Optimize {
        /// Suite directory holding the traces.
        #[arg(long)]
        suite: PathBuf,
        /// Directory holding results.json.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        registry: PathBuf,
        /// `scripted:<file>` or `http`.
        #[arg(long)]
        backend: String,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Write a suite: manifest.tsv plus one trace file per case.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Comma-separated error types (or `none`), weighted equally.
        #[arg(long, default_value = "extraction,update,deletion,retrieval,response")]
        types: String,
        #[arg(long, default_value_t = 40)]
        n_messages: usize,
    },
    /// Attribute every case of a suite.
    Run {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        agent: AgentArgs,
        /// Parallel cases; results are merged in case-id order.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score results against the suite manifest.
    Score {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        results: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Graph,
    Obs,
}

#[derive(Args, Clone)]
struct AgentArgs {
    #[arg(long, value_enum, default_value_t = Method::Graph)]
    method: Method,
    /// `omniscient`, `scripted:<file>` or `http`.
    #[arg(long, default_value = "omniscient")]
    backend: String,
    /// Start from the case's source evidence instead of retrieval seeds.
    #[arg(long)]
    seed_evidence: bool,
    /// File with a coarse pipeline description for the instruction.
    #[arg(long)]
    prior_knowledge: Option<PathBuf>,
    #[arg(long = "n", default_value_t = 16)]
    n: usize,
    #[arg(long = "t", default_value_t = 272_000)]
    t: u64,
    #[arg(long, default_value_t = 200)]
    max_iters: u32,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 8)]
    search_limit: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Validate { path } => commands::validate(&path),
        Command::Viz {
            path,
            out,
            max_value_chars,
        } => commands::viz(&path, out.as_deref(), max_value_chars),
        Command::Attribute { path, agent, out } => commands::attribute(&path, &agent, out.as_deref()),
        Command::Bench { command } => match command {
            BenchCommand::Generate {
                out,
                n,
                seed,
                types,
                n_messages,
            } => commands::bench_generate(&out, n, seed, &types, n_messages),
            BenchCommand::Run {
                suite,
                out,
                agent,
                jobs,
            } => commands::bench_run(&suite, &out, &agent, jobs),
            BenchCommand::Score { suite, results } => commands::bench_score(&suite, &results),
        },
        Command::Report {
            results,
            backend,
            exemplar,
            out,
        } => commands::report(&results, &backend, exemplar.as_deref(), &out),
        Command::Optimize {
            suite,
            results,
            registry,
            backend,
            out,
        } => commands::optimize(&suite, &results, &registry, &backend, &out),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
