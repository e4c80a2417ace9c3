use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use finp_core::experiment::{
    render_report, replay_attack, run_to_dir, write_sia_csvs, ExperimentConfig, TieBreakMode,
};

#[derive(Parser)]
#[command(
    name = "finp",
    version,
    about = "Fairness-in-privacy federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "FINP_OUT")]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long, env = "FINP_SEED")]
        seed: Option<u64>,
        /// Overrides the worker count in the config file.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Recompute attack results from stored checkpoints.
    AttackReplay {
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Break loss ties at random, as with `attack.tie_break = random`.
        #[arg(long)]
        random_tie_break: bool,
    },
    /// Rebuild summary.json from a run directory's CSVs.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.downcast_ref::<finp_core::Error>() else {
        return 1;
    };
    match e.category() {
        "config" => 2,
        "invalid-input" => 3,
        "parse" => 4,
        "io" => 5,
        "checkpoint" => 6,
        "numeric" => 7,
        "partition" => 8,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            workers,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(workers) = workers {
                cfg.workers = workers;
            }
            for w in cfg.warnings() {
                eprintln!("warning: {w}");
            }
            let output = run_to_dir(&cfg, &out)?;
            let s = &output.summary.metrics;
            println!(
                "{} seed {}: test_acc {:.4} mean_sia {:.4} max_sia {:.4} converged {}",
                output.summary.strategy,
                output.summary.seed,
                s.test_acc,
                s.mean_sia,
                s.max_sia,
                s.converged
            );
            println!("wrote {}", out.display());
        }
        Command::AttackReplay {
            checkpoints,
            targets,
            out,
            random_tie_break,
        } => {
            let mode = if random_tie_break {
                TieBreakMode::Random
            } else {
                TieBreakMode::LowestId
            };
            let results = replay_attack(&checkpoints, &targets, mode)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_sia_csvs(&results, &out)?;
            println!("replayed {} rounds into {}", results.len(), out.display());
        }
        Command::Report { input } => {
            render_report(&input)?;
            let path = input.join("summary.json");
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = err
                .downcast_ref::<finp_core::Error>()
                .map_or("error", finp_core::Error::category);
            eprintln!("error [{category}]: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
