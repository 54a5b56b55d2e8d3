use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tiered_replay::harness::{
    run_seeds, run_speed_test, run_sweep, write_outputs, write_speed_outputs, ExperimentConfig, HarnessError,
    Labeled, RunMode, SweepAxis,
};

#[derive(Parser)]
#[command(version, about = "Continual-learning replay with an episodic memory backed by storage")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment over every configured seed.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run one experiment per value of a config axis.
    Sweep {
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(SweepAxisArg))]
        axis: SweepAxisArg,
        /// Comma-separated axis values, e.g. `0,0.1,0.5,1` or `1x,1.5x,unbounded`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare bundle wall time with swapping off, synchronous and asynchronous.
    Speed {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Overrides the configured seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(RunModeArg))]
    mode: Option<RunModeArg>,
}

#[derive(Clone)]
struct SweepAxisArg(SweepAxis);
#[derive(Clone)]
struct RunModeArg(RunMode);

impl std::str::FromStr for SweepAxisArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.parse().map(SweepAxisArg)
    }
}

impl std::str::FromStr for RunModeArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.parse().map(RunModeArg)
    }
}

fn load(path: &PathBuf, common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.run.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.run.output = out.clone();
    }
    if let Some(mode) = &common.mode {
        cfg.swap.mode = mode.0;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config, common } => {
            let cfg = load(&config, &common)?;
            let summary = run_seeds(&cfg, "")?;
            write_outputs(
                &cfg.run.output,
                &cfg.hash(),
                &[Labeled {
                    axis: None,
                    axis_value: String::new(),
                    summary: &summary,
                }],
            )?;
            println!(
                "final accuracy {:.2} ± {:.2}  final forgetting {:.2} ± {:.2}  ({} seeds) -> {}",
                summary.final_accuracy_mean,
                summary.final_accuracy_std,
                summary.final_forgetting_mean,
                summary.final_forgetting_std,
                summary.seeds.len(),
                cfg.run.output.display()
            );
        }
        Command::Sweep {
            config,
            axis,
            values,
            common,
        } => {
            let cfg = load(&config, &common)?;
            let results = run_sweep(&cfg, axis.0, &values)?;
            let groups: Vec<Labeled<'_>> = results
                .iter()
                .map(|(v, s)| Labeled {
                    axis: Some(axis.0),
                    axis_value: v.clone(),
                    summary: s,
                })
                .collect();
            write_outputs(&cfg.run.output, &cfg.hash(), &groups)?;
            for (v, s) in &results {
                println!(
                    "{}={v}: final accuracy {:.2} ± {:.2}  final forgetting {:.2} ± {:.2}",
                    axis.0, s.final_accuracy_mean, s.final_accuracy_std, s.final_forgetting_mean, s.final_forgetting_std
                );
            }
        }
        Command::Speed { config, common } => {
            let cfg = load(&config, &common)?;
            let modes = match &common.mode {
                Some(m) if m.0 != RunMode::Off => vec![RunMode::Off, m.0],
                _ => vec![RunMode::Off, RunMode::Sync, RunMode::Async],
            };
            let rows = run_speed_test(&cfg, &modes)?;
            write_speed_outputs(&cfg.run.output, &cfg.hash(), &rows)?;
            for r in &rows {
                let overhead = r.overhead_pct.map_or_else(|| "baseline".to_string(), |p| format!("{p:+.1}%"));
                println!(
                    "{:<5} {:>10.1} ms over {} batches ({:.2} ms/batch)  {overhead}",
                    r.mode.to_string(),
                    r.timed_wall_ms,
                    r.timed_batches,
                    r.per_batch_ms
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
