use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relnet_cli::config::RunConfig;
use relnet_cli::{cmd_eval, cmd_report, cmd_simulate, cmd_train, CmdResult, EvalArgs, FailureExt, Resolved};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Simulate coupled systems, learn their interaction graphs and score the
/// result.
#[derive(Parser, Debug)]
#[command(name = "relnet", version = relnet_cli::VERSION)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// JSON run config, or any artifact manifest or report embedding one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Catalog task (1 to 13).
    #[arg(long)]
    task: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs (train: start over instead of resuming).
    #[arg(long)]
    force: bool,
    /// Worker threads for simulation and evaluation.
    #[arg(long)]
    threads: Option<usize>,
    /// Forecast horizons, comma separated.
    #[arg(long, value_delimiter = ',')]
    horizon: Option<Vec<usize>>,
    /// Override the number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training and test datasets.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a model, resuming from the last checkpoint when one exists.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Train on this dataset file instead of `<out>/train.cds`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write report.json.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to `<out>/best.nrim` (the task-1 checkpoint for tasks 12 and 13).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `<out>/test.cds`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Write predicted and true link matrices per simulation.
        #[arg(long)]
        export_adjacency: bool,
        /// Write forecast and observed trajectories per simulation.
        #[arg(long)]
        export_trajectories: bool,
    },
    /// Combine reports into one table.
    Report {
        /// Run directories, report.json files or report CSV tables.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Directory for report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn set_threads(threads: Option<usize>) -> CmdResult<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(relnet_cli::Failure::Usage(anyhow::anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().runtime()?;
    }
    Ok(())
}

fn resolve(run: &RunArgs) -> CmdResult<(Resolved, bool)> {
    set_threads(run.threads)?;
    let mut cfg = match &run.config {
        Some(p) => RunConfig::load(p).usage()?,
        None => RunConfig::default(),
    };
    if let Some(t) = run.task {
        cfg.task = Some(t);
        cfg.custom = None;
    }
    if run.seed.is_some() {
        cfg.seed = run.seed;
    }
    if run.out.is_some() {
        cfg.out = run.out.clone();
    }
    if run.horizon.is_some() {
        cfg.horizons = run.horizon.clone();
    }
    if run.epochs.is_some() {
        cfg.train.epochs = run.epochs;
    }
    Ok((cfg.resolve().usage()?, run.force))
}

fn run(cli: Cli) -> CmdResult<()> {
    match cli.command {
        Command::Simulate { run } => {
            let (r, force) = resolve(&run)?;
            cmd_simulate(&r, force)?;
        }
        Command::Train { run, dataset } => {
            let (r, force) = resolve(&run)?;
            let out = cmd_train(&r, force, dataset.as_deref())?;
            println!(
                "best validation accuracy {:.3}% at epoch {} ({} epochs done)",
                out.best_val_acc,
                out.best_epoch,
                out.history.records.len()
            );
        }
        Command::Eval {
            run,
            checkpoint,
            dataset,
            export_adjacency,
            export_trajectories,
        } => {
            let (r, force) = resolve(&run)?;
            let args = EvalArgs {
                checkpoint,
                dataset,
                export_adjacency,
                export_trajectories,
            };
            let report = cmd_eval(&r, force, &args)?;
            println!("accuracy {:.3} ± {:.3}%", report.accuracy, report.accuracy_std);
            for m in &report.mse {
                println!("MSE@{}: {:.4e} (static baseline {:.4e})", m.horizon, m.model, m.baseline);
            }
        }
        Command::Report { inputs, out, threads } => {
            set_threads(threads)?;
            let csv = out.map(|d| d.join("report.csv"));
            let table = cmd_report(&inputs, csv.as_deref())?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
