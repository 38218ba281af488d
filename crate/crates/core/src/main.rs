use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cfsense::config::{parse_range, RunConfig, Tool};
use cfsense::{pipeline, selftest};

#[derive(Parser)]
#[command(name = "cfsense", version, about = "Counterfactual fairness sensitivity to unmeasured confounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the models and run the selected sensitivity tool.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        tool: Option<Tool>,
        /// MaxCFU budgets as lo:hi:count.
        #[arg(long, allow_hyphen_values = true)]
        budgets: Option<String>,
        /// Grid correlations as lo:hi:count.
        #[arg(long, allow_hyphen_values = true)]
        p_grid: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run the built-in numerical checks.
    Selftest,
}

fn run(
    config: PathBuf,
    tool: Option<Tool>,
    budgets: Option<String>,
    p_grid: Option<String>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> cfsense::Result<bool> {
    let mut cfg = RunConfig::load(&config)?;
    if let Some(t) = tool {
        cfg.tool = t;
    }
    if let Some(b) = budgets {
        cfg.maxcfu.budgets = parse_range(&b)?;
    }
    if let Some(g) = p_grid {
        cfg.grid.p_grid = parse_range(&g)?;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if threads.is_some() {
        cfg.threads = threads;
    }
    let summary = pipeline::run(&cfg)?;
    for note in &summary.notes {
        eprintln!("note: {note}");
    }
    for err in &summary.errors {
        eprintln!("error: {err}");
    }
    println!("wrote {}", cfg.output_dir.display());
    Ok(summary.succeeded())
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            tool,
            budgets,
            p_grid,
            out,
            seed,
            threads,
        } => match run(config, tool, budgets, p_grid, out, seed, threads) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::FAILURE,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Command::Selftest => {
            let results = selftest::run_all();
            print!("{}", selftest::format_table(&results));
            if results.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
