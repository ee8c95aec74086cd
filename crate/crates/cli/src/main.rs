use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lasa_cli::{compare, kappa_run, load_config, render_comparison, run_to_dir};

#[derive(Parser)]
#[command(name = "lasa", about = "Byzantine-robust federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment config.
    Run {
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dump each round's aggregated update as a binary record.
        #[arg(long)]
        dump_updates: bool,
    },
    /// Run several configs and print a comparison table.
    Compare {
        configs: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the robustness coefficient for a config.
    Kappa {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// `--out` wins, then the `LASA_OUT` environment variable, then the config.
fn out_override(flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| std::env::var_os("LASA_OUT").map(PathBuf::from))
}

fn run() -> lasa_core::Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            out,
            dump_updates,
        } => {
            let out = out_override(out);
            let cfg = load_config(&config, seed, out.as_deref())?;
            let artifacts = run_to_dir(&cfg, dump_updates)?;
            println!(
                "{}: final accuracy {:.4}, best {:.4} -> {}",
                artifacts.summary.name,
                artifacts.summary.final_accuracy,
                artifacts.summary.best_accuracy,
                artifacts.dir.display()
            );
        }
        Command::Compare {
            configs,
            jobs,
            seed,
            out,
        } => {
            if configs.is_empty() {
                return Err(lasa_core::Error::Config("compare needs at least one config".into()));
            }
            let out = out_override(out);
            let cfgs: Vec<_> = configs
                .iter()
                .map(|p| load_config(p, seed, out.as_deref()))
                .collect::<lasa_core::Result<_>>()?;
            let out_dir = cfgs[0].out_dir.clone();
            let summaries = compare(&cfgs, jobs, &out_dir)?;
            render_comparison(&summaries, &mut std::io::stdout())?;
        }
        Command::Kappa { config, seed, out } => {
            let out = out_override(out);
            let cfg = load_config(&config, seed, out.as_deref())?;
            let report = kappa_run(&cfg)?;
            println!(
                "{}: empirical kappa {:.6e}, bound {:.6e}, {}/{} trials within bound",
                cfg.name,
                report.empirical_kappa,
                report.bound,
                report.trials_within_bound,
                report.trials_with_preconditions
            );
        }
    }
    Ok(())
}
