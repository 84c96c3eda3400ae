use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use grot_core::io::read_config;

mod pipeline;

use pipeline::SolveStatus;

/// Transport-based flow recovery from density snapshots.
///
/// Exit status: 0 on success, 2 when the solver stopped without meeting its
/// tolerance (outputs are still written), 1 on any error.
#[derive(Parser)]
#[command(name = "grot", version)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log progress to standard error.
    #[arg(long, short, global = true)]
    verbose: bool,

    /// Validate inputs and print the resolved plan without computing.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Recover clean densities and velocity from the observations.
    Solve(ConfigArg),
    /// Streamlines, pathway counts and clusters from a solved run.
    Fpa(ConfigArg),
    /// Solve followed by flow pattern analysis.
    Run(ConfigArg),
    /// Generate synthetic truth, noisy observations and a run config.
    Synth {
        /// Synthetic spec (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the spec's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Error metrics of a result against a target volume or series.
    Compare {
        /// Volume file or solved run directory.
        #[arg(long)]
        result: PathBuf,
        /// Volume file or truth series directory.
        #[arg(long)]
        target: PathBuf,
        /// Also run the fixed-endpoint baseline on this config's observations.
        #[arg(long, requires = "config")]
        baseline: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the CSV here as well as to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn status_code(s: SolveStatus) -> ExitCode {
    match s {
        SolveStatus::Converged => ExitCode::SUCCESS,
        SolveStatus::NotConverged => {
            log::warn!("solver stopped before reaching its tolerance");
            ExitCode::from(2)
        }
    }
}

fn synth_out_dir(spec_path: &Path, out: Option<PathBuf>, spec_out: Option<&str>) -> PathBuf {
    let base = spec_path.parent().unwrap_or(Path::new(""));
    match (out, spec_out) {
        (Some(o), _) => o,
        (None, Some(s)) => base.join(s),
        (None, None) => base.join("synth"),
    }
}

fn execute(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let dry = cli.dry_run;
    match cli.command {
        Command::Solve(a) => {
            let cfg = read_config(&a.config)?;
            Ok(status_code(pipeline::solve(&cfg, dry)?))
        }
        Command::Fpa(a) => {
            let cfg = read_config(&a.config)?;
            pipeline::fpa(&cfg, dry)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Run(a) => {
            let cfg = read_config(&a.config)?;
            let status = pipeline::solve(&cfg, dry)?;
            if dry {
                println!("then: fpa on the solve outputs in {}", cfg.run_dir.display());
                return Ok(ExitCode::SUCCESS);
            }
            pipeline::fpa(&cfg, false)?;
            Ok(status_code(status))
        }
        Command::Synth { config, out } => {
            let spec = pipeline::read_synth_spec(&config)?;
            let dir = synth_out_dir(&config, out, spec.out_dir.as_deref());
            pipeline::synth(&spec, &dir, dry)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare {
            result,
            target,
            baseline,
            config,
            out,
        } => {
            let cfg = match (baseline, config) {
                (true, Some(p)) => Some(read_config(&p)?),
                _ => None,
            };
            pipeline::compare(&result, &target, cfg.as_ref(), out.as_deref(), dry)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
