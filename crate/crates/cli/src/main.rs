//! `fedsynth` command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or file format error,
//! 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsynth_core::experiment::{self, ExperimentConfig};
use fedsynth_core::server::Method;
use fedsynth_core::Error;

#[derive(Debug, Parser)]
#[command(name = "fedsynth", version, about = "Federated long-tail learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write metrics.jsonl, final.json and config.resolved.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// fedavg, clip2fl, no_pcl or no_kd.
        #[arg(long)]
        method: Option<String>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Output directory; defaults to `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a config value, e.g. `--set server.eta_pcl=0.0001`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the per-client per-class sample counts as CSV.
    PartitionReport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Tabulate final accuracies of finished runs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::Dimension { .. }
        | Error::LabelOutOfRange { .. }
        | Error::Empty(_) => 2,
        Error::Io { .. } | Error::Format(_) | Error::Json(_) => 3,
        Error::Numeric(_) | Error::Degenerate(_) => 4,
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, Error> {
    ExperimentConfig::load(path, overrides)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            seed,
            method,
            workers,
            out,
            mut overrides,
        } => {
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
            if let Some(m) = method {
                let m: Method = m.parse()?;
                overrides.push(format!("method=\"{m}\""));
            }
            let cfg = load_config(&config, &overrides)?;
            let out = out
                .or_else(|| cfg.out_dir.clone())
                .ok_or_else(|| Error::Config("out_dir: no output directory (pass --out)".into()))?;
            let result = experiment::run_with_workers(&cfg, Some(&out), workers)?;
            let s = &result.summary;
            let pct = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x));
            println!(
                "{} seed {}: all {} many {} medium {} few {} ({} rounds) -> {}",
                s.method,
                s.seed,
                pct(Some(s.acc_all)),
                pct(s.acc_many),
                pct(s.acc_medium),
                pct(s.acc_few),
                s.rounds,
                out.display()
            );
        }
        Command::PartitionReport { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            print!("{}", experiment::partition_report(&cfg)?);
        }
        Command::Compare { dirs } => {
            print!("{}", experiment::compare(&dirs)?.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
