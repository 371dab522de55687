use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spde_cli::commands;
use spde_cli::{FieldFormat, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "spde",
    version,
    about = "Simulate linear parabolic SPDE fields with damped noise and estimate their parameters"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print model constants and theoretical moments as JSON
    Constants {
        /// Path to the JSON run configuration
        #[arg(long)]
        config: PathBuf,
    },
    /// Simulate one field sample into the output directory
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Override the master seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of time steps
        #[arg(long)]
        n: Option<usize>,
        /// Override the output directory
        #[arg(long)]
        output_dir: Option<String>,
        /// Override the field file format
        #[arg(long, value_enum)]
        format: Option<FieldFormat>,
    },
    /// Estimate parameters from a stored field sample
    Estimate {
        #[arg(long)]
        config: PathBuf,
        /// Path to a field sample written by `simulate`
        #[arg(long)]
        sample: PathBuf,
        /// Estimate the damping exponent first and plug it into the other
        /// estimators
        #[arg(long)]
        pipeline_alpha: bool,
        #[arg(long)]
        output_dir: Option<String>,
    },
    /// Run a Monte Carlo study with parallel replications
    Mc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the replication count
        #[arg(long)]
        replications: Option<usize>,
        /// Worker threads for replications (results do not depend on this)
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        output_dir: Option<String>,
    },
    /// Variance-cache maintenance
    Cache {
        #[command(subcommand)]
        cmd: CacheCmd,
    },
}

#[derive(Subcommand)]
enum CacheCmd {
    /// Build (or refresh) the replacement variance cache
    Build {
        #[arg(long)]
        config: PathBuf,
        /// Cache file path (default: <output_dir>/variance_cache.json)
        #[arg(long)]
        cache: Option<String>,
    },
}

// stdout printing that treats a closed pipe (e.g. `spde constants | head`)
// like the conventional silent SIGPIPE death instead of a panic
fn emit(line: String) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if writeln!(out, "{line}").and_then(|()| out.flush()).is_err() {
        std::process::exit(141);
    }
}

fn run(cli: Cli) -> spde_core::Result<()> {
    match cli.cmd {
        Cmd::Constants { config } => {
            let cfg = RunConfig::load(&config)?;
            let value = commands::run_constants(cfg, &Overrides::default())?;
            emit(serde_json::to_string_pretty(&value)?);
        }
        Cmd::Simulate {
            config,
            seed,
            n,
            output_dir,
            format,
        } => {
            let cfg = RunConfig::load(&config)?;
            let ov = Overrides {
                seed,
                n,
                output_dir,
                field_format: format,
                ..Overrides::default()
            };
            let out = commands::run_simulate(cfg, &ov)?;
            if let Some(cache) = &out.cache {
                let source = if cache.loaded { "loaded" } else { "computed" };
                let stored = if cache.persisted { ", persisted" } else { "" };
                emit(format!("variance cache {source}{stored}"));
                if let Some(w) = &cache.warning {
                    eprintln!("warning: {w}");
                }
            }
            emit(format!("wrote field sample to {}", out.field_path.display()));
        }
        Cmd::Estimate {
            config,
            sample,
            pipeline_alpha,
            output_dir,
        } => {
            let cfg = RunConfig::load(&config)?;
            let ov = Overrides {
                output_dir,
                pipeline_alpha: pipeline_alpha.then_some(true),
                ..Overrides::default()
            };
            let (_, path) = commands::run_estimate(cfg, &ov, &sample)?;
            emit(format!("wrote estimation report to {}", path.display()));
        }
        Cmd::Mc {
            config,
            seed,
            replications,
            workers,
            output_dir,
        } => {
            let cfg = RunConfig::load(&config)?;
            let ov = Overrides {
                seed,
                replications,
                output_dir,
                ..Overrides::default()
            };
            let out = commands::run_mc(cfg, &ov, workers)?;
            emit(format!(
                "completed {}/{} replications ({} failed)",
                out.summary.completed,
                out.summary.replications,
                out.summary.failures.len()
            ));
            emit(format!(
                "wrote {} and {}",
                out.csv_path.display(),
                out.summary_path.display()
            ));
        }
        Cmd::Cache { cmd } => match cmd {
            CacheCmd::Build { config, cache } => {
                let cfg = RunConfig::load(&config)?;
                let ov = Overrides {
                    cache_path: cache,
                    ..Overrides::default()
                };
                let (path, report) = commands::run_cache_build(cfg, &ov)?;
                let source = if report.loaded { "loaded" } else { "computed" };
                emit(format!("variance cache {source} at {}", path.display()));
                if let Some(w) = &report.warning {
                    eprintln!("warning: {w}");
                }
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
