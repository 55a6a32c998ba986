use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use tdciv::civgraph::{build_paper_dag, parse_dag, FullTimeDag, TimedNode};
use tdciv::pipeline::{self, CivCheckRequest, PipelineError, RunConfig};

#[derive(Parser)]
#[command(name = "tdciv", version, about = "Time-varying conditional instruments for panel time series")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-replicate work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write one synthetic panel per replicate and a manifest.
    Generate,
    /// Check whether a node is a conditional instrument in a DAG.
    CivCheck(CivCheckArgs),
    /// Train one model per replicate.
    Train,
    /// Estimate per-step effects for every replicate.
    Estimate {
        /// Use the generator's true instrument and conditioning set.
        #[arg(long)]
        oracle: bool,
    },
    /// Run every configured method, join with the truth and aggregate.
    Evaluate,
}

#[derive(Args)]
struct CivCheckArgs {
    /// Use the built-in unrolled graph with this horizon.
    #[arg(long, conflicts_with = "dag", required_unless_present = "dag")]
    paper_dag: Option<u32>,
    /// Edge-list file, one `A[t] -> B[u]` per line.
    #[arg(long)]
    dag: Option<PathBuf>,
    /// Leave the proxy channel out of the built-in graph.
    #[arg(long)]
    no_proxy: bool,
    /// Step whose treatment effect is checked.
    #[arg(long, default_value_t = 2)]
    step: u32,
    #[arg(long)]
    instrument: Option<TimedNode>,
    #[arg(long)]
    treatment: Option<TimedNode>,
    #[arg(long)]
    outcome: Option<TimedNode>,
    /// Comma-separated conditioning set replacing the default history set.
    #[arg(long, value_delimiter = ',')]
    given: Option<Vec<TimedNode>>,
    /// Node removed from the conditioning set; repeatable.
    #[arg(long)]
    without: Vec<TimedNode>,
}

fn load_config(global: &Global) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(value: &impl Serialize) -> Result<(), PipelineError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read_graph(args: &CivCheckArgs) -> Result<FullTimeDag, PipelineError> {
    if let Some(path) = &args.dag {
        let text = std::fs::read_to_string(path)
            .map_err(|source| PipelineError::Io { path: path.clone(), source })?;
        return parse_dag(&text).map_err(|e| PipelineError::Input { path: path.clone(), message: e.to_string() });
    }
    let horizon = args.paper_dag.expect("clap requires --paper-dag or --dag");
    Ok(build_paper_dag(horizon, !args.no_proxy)?)
}

fn civ_check(args: &CivCheckArgs) -> Result<bool, PipelineError> {
    let g = read_graph(args)?;
    let req = CivCheckRequest {
        step: args.step,
        instrument: args.instrument.clone(),
        treatment: args.treatment.clone(),
        outcome: args.outcome.clone(),
        given: args.given.clone(),
        without: args.without.clone(),
    };
    let result = pipeline::civ_check(&g, &req)?;
    print_json(&result)?;
    if let Some(w) = &result.verdict.witness {
        let path: Vec<String> = w.path.iter().map(ToString::to_string).collect();
        eprintln!("{:?} fails: {}", w.condition, path.join(" - "));
    }
    Ok(result.verdict.holds())
}

fn run(cli: &Cli) -> Result<bool, PipelineError> {
    let g = &cli.global;
    if let Command::CivCheck(args) = &cli.command {
        return civ_check(args);
    }
    let cfg = load_config(g)?;
    match &cli.command {
        Command::Generate => print_json(&pipeline::generate(&cfg, &g.out, g.jobs)?)?,
        Command::Train => print_json(&pipeline::train(&cfg, &g.out, g.jobs)?)?,
        Command::Estimate { oracle } => {
            let (reports, failures) = pipeline::estimate(&cfg, &g.out, g.jobs, *oracle)?;
            eprintln!("{} replicates estimated, {} weak-instrument failures", reports.len(), failures.len());
            for f in &failures {
                eprintln!("replicate {} ({}): {}", f.replicate, f.method, f.message);
            }
        }
        Command::Evaluate => {
            let summary = pipeline::evaluate(&cfg, &g.out, g.jobs)?;
            let from = cfg.estimation.from_step;
            for m in &cfg.estimation.methods {
                let label = m.label();
                let failed = summary.failures.iter().filter(|f| f.method == label).count();
                match summary.mean_error(label, from) {
                    Some(e) => println!("{label}: mean |error| over t >= {from} = {e:.4} ({failed} failures)"),
                    None => println!("{label}: no estimates ({failed} failures)"),
                }
            }
        }
        Command::CivCheck(_) => unreachable!("handled above"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
