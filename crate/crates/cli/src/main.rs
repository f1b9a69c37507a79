use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mole_core::checkpoint::{write_atomic, Checkpoint};
use mole_core::config::ExperimentConfig;
use mole_core::experiment::{self, SweepAxis};

#[derive(Parser)]
#[command(name = "mole", about = "Sparse mixture-of-LoRA-experts experiments on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a config and write checkpoint, metrics and routing stats.
    Run { config: PathBuf },
    /// One run per value of an axis, then a comparison table.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated values replacing the axis defaults.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Export per-domain routing statistics of a checkpoint.
    Stats {
        checkpoint: PathBuf,
        /// Config whose mixture supplies the eval domains.
        #[arg(long)]
        eval: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Print the FLOP and parameter report without training.
    Audit { config: PathBuf },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    cfg.apply_env();
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load(&config)?;
            let art = experiment::run_experiment(&cfg)?;
            for e in &art.report.eval {
                println!("eval {} {:.6}", e.domain, e.loss);
            }
            println!("checkpoint {}", art.checkpoint.display());
            println!("metrics {}", art.metrics.display());
            println!("routing stats {}", art.routing_stats.display());
            if let Some(summary) = &art.conflict {
                println!();
                print!("{}", summary.table());
            }
        }
        Command::Sweep { config, axis, values } => {
            let cfg = load(&config)?;
            let axis = SweepAxis::parse(&axis)?;
            let values = values.unwrap_or_else(|| axis.default_values());
            let rows = experiment::sweep(&cfg, axis, &values);
            let table = experiment::sweep_table(axis, &rows);
            std::fs::create_dir_all(&cfg.output_dir)?;
            write_atomic(&cfg.output_dir.join(format!("sweep-{}.txt", axis.name())), table.as_bytes())?;
            print!("{table}");
        }
        Command::Stats { checkpoint, eval, out } => {
            let cfg = load(&eval)?;
            let mix = cfg.build_mixture()?;
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let (_, model, _) = ck.restore()?;
            let sets = experiment::eval_sets(&mix, cfg.report.eval_instances, cfg.report.eval_seed)?;
            let csv = experiment::stats_csv(&experiment::export_routing_stats(&model, &sets)?);
            match out {
                Some(p) => write_atomic(&p, csv.as_bytes())?,
                None => print!("{csv}"),
            }
        }
        Command::Audit { config } => print!("{}", experiment::audit(&load(&config)?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
