//! `selflabel` command-line tool: transport solves, self-labelling runs,
//! evaluation and timing.

mod commands;
mod exit;
mod options;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::options::TrainOpts;

#[derive(Parser, Debug)]
#[command(name = "selflabel", version, about = "Balanced self-labelling with Sinkhorn-Knopp pseudo-labels")]
struct Cli {
    /// Worker threads for parallel reductions [default: all cores].
    #[arg(long, global = true, env = "SL_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Balanced pseudo-labels for a K x N log-probability matrix via Sinkhorn-Knopp.
    Solve(SolveArgs),
    /// Optimal balanced hard assignment for a small log-probability matrix.
    Oracle(OracleArgs),
    /// Self-labelling run on blobs or a feature file.
    Train(TrainArgs),
    /// Train a fresh model on the final labels of an earlier run.
    Retrain(RetrainArgs),
    /// Score a finished run: head metrics, kNN and linear-probe accuracy.
    Eval(EvalArgs),
    /// Supervised, Sinkhorn and K-means labellers under class imbalance.
    Imbalance(ImbalanceArgs),
    /// Time Sinkhorn iterations over a (K, N) grid.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SolveArgs {
    /// K x N log-probabilities, one row per label (SLFM or CSV).
    #[arg(long)]
    input: PathBuf,
    /// Expected number of labels; checked against the input.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 25.0)]
    lambda: f64,
    /// Marginal tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 2000)]
    max_iter: usize,
    /// Labels CSV (`index,label`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Diagnostics JSON.
    #[arg(long)]
    diag: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    /// K x N log-probabilities, one row per label (SLFM or CSV).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cost JSON.
    #[arg(long)]
    diag: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// JSON file with the same keys as the flags; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct RetrainArgs {
    /// Directory of the run whose labels are reused.
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Seed for the fresh model [default: the original run's].
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs [default: the original run's].
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Report JSON [default: <run-dir>/eval.json].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ImbalanceArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// JSON file with the same keys as the flags; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds to run, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Label counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "100")]
    k: Vec<usize>,
    /// Point counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "10000,100000,1000000")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 25.0)]
    lambda: f64,
    /// Timed repetitions per grid point.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Sweeps per timed run when --tol is not given.
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Run to this tolerance instead of a fixed sweep count.
    #[arg(long)]
    tol: Option<f64>,
    /// Iteration cap with --tol.
    #[arg(long, default_value_t = 2000)]
    max_iter: usize,
    /// Range of the random logits.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report CSV [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(exit::EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(exit::EXIT_USAGE);
        }
    }
    let result = match cli.command {
        Command::Solve(a) => commands::solve(&a),
        Command::Oracle(a) => commands::oracle(&a),
        Command::Train(a) => commands::train(a),
        Command::Retrain(a) => commands::retrain(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Imbalance(a) => commands::imbalance(a),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
