//! `fedsim`: run federated-learning experiments, compare their summaries,
//! and inspect partition manifests.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsim_core::harness::{
    compare_runs, run_experiment, ExperimentConfig, ExperimentReport, Overrides,
};
use fedsim_core::partition::FederatedPartition;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Deterministic FedAvg simulator with server-side iterate averaging and epoch decay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file, with optional overrides
    Run(RunArgs),
    /// Compare two summary.json files threshold by threshold
    Compare {
        /// Baseline summary (run A)
        summary_a: PathBuf,
        /// Candidate summary (run B)
        summary_b: PathBuf,
    },
    /// Inspect a partition manifest
    Partition {
        /// Manifest file to check and summarize
        #[arg(long, value_name = "MANIFEST")]
        inspect: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML)
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override P: models averaged by the server policy
    #[arg(long)]
    p: Option<usize>,
    /// Override R: server-averaging period in rounds
    #[arg(long)]
    r: Option<usize>,
    /// Override D: epoch-decay interval in rounds (0 disables decay)
    #[arg(long)]
    decay_d: Option<usize>,
    /// Override the number of trials
    #[arg(long)]
    trials: Option<usize>,
    /// First trial index to run (trial seeds depend only on the absolute
    /// index, so trial ranges can be split across processes)
    #[arg(long)]
    trial_offset: Option<usize>,
    /// Override the root seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the communication-round cap
    #[arg(long)]
    rounds: Option<usize>,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_thread_pool() {
    #[cfg(feature = "parallel")]
    if let Ok(v) = std::env::var("FEDSIM_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the thread pool: {e}");
                }
            }
            _ => log::warn!("ignoring invalid FEDSIM_THREADS={v:?}"),
        }
    }
}

fn run(args: RunArgs) -> fedsim_core::Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    Overrides {
        p: args.p,
        r: args.r,
        decay_d: args.decay_d,
        trials: args.trials,
        trial_offset: args.trial_offset,
        seed: args.seed,
        rounds: args.rounds,
        out: args.out,
    }
    .apply(&mut cfg);

    let report = run_experiment(&cfg)?;
    println!(
        "wrote {} trial(s) to {}",
        report.trials.len(),
        cfg.experiment.out_dir.display()
    );
    for (key, stats) in &report.thresholds {
        match (stats.mean, stats.std) {
            (Some(mean), Some(std)) => println!(
                "T[{key}]: {mean:.2} +- {std:.2} rounds ({} of {} trials reached)",
                stats.reached,
                stats.reached + stats.not_reached
            ),
            _ => println!(
                "T[{key}]: not reached in any of {} trial(s)",
                stats.not_reached
            ),
        }
    }
    Ok(())
}

fn compare(a: PathBuf, b: PathBuf) -> fedsim_core::Result<()> {
    let ra = ExperimentReport::read_file(&a)?;
    let rb = ExperimentReport::read_file(&b)?;
    let cmp = compare_runs(&ra, &rb)?;
    print!("{cmp}");
    Ok(())
}

fn inspect(path: PathBuf) -> fedsim_core::Result<()> {
    let p = FederatedPartition::read_manifest_file(&path)?;
    p.check_invariants()?;
    let sizes: Vec<usize> = p.clients().iter().map(Vec::len).collect();
    let min = sizes.iter().min().copied().unwrap_or(0);
    let max = sizes.iter().max().copied().unwrap_or(0);
    println!("kind: {}", p.kind());
    println!("seed: {}", p.seed());
    println!("clients: {}", p.n_clients());
    println!("samples: {} ({} dropped)", p.n_samples(), p.dropped());
    if p.shards_per_client() > 0 {
        println!(
            "shards: {} per client, {} samples each",
            p.shards_per_client(),
            p.shard_size()
        );
    }
    println!("client sizes: min {min}, max {max}");
    println!("invariants: ok");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_thread_pool();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Compare {
            summary_a,
            summary_b,
        } => compare(summary_a, summary_b),
        Command::Partition { inspect: path } => inspect(path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
