//! Command-line runner: `run`, `ablate`, `compare` and `plot`.

mod experiment;
pub mod report;

pub use experiment::{
    ablation_settings, build_clients, prepare, run_ablation, run_experiment, run_mode, write_outputs, AblationConfig,
    ExperimentConfig, ExperimentOutput, ModeOutcome, Prepared,
};

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

/// Environment variable holding the log filter, e.g. `info`.
pub const LOG_ENV: &str = "FEDREP_LOG";

#[derive(Debug, Parser)]
#[command(name = "fedrep", version, about = "Federated face-representation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain, federate every configured mode and write metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the negative count of the full mode.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Final-round comparison of metrics files.
    Compare {
        #[arg(required = true, num_args = 2..)]
        files: Vec<PathBuf>,
    },
    /// SVG curve of one metric per mode.
    Plot {
        #[arg(long)]
        metric: String,
        file: PathBuf,
        /// Output path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::NonFiniteLoss { .. } => EXIT_NON_FINITE,
        _ => EXIT_FAILURE,
    }
}

fn load(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Execute a parsed command, returning text for stdout.
pub fn execute(cmd: Command) -> Result<String> {
    match cmd {
        Command::Run { config, seed, out } => {
            let cfg = load(&config, seed, out)?;
            let res = run_experiment(&cfg)?;
            write_outputs(&cfg.out_dir, &cfg, &res, "")?;
            res.summary("run")
        }
        Command::Ablate { config, seed, out } => {
            let cfg = load(&config, seed, out)?;
            let res = run_ablation(&cfg)?;
            write_outputs(&cfg.out_dir, &cfg, &res, "ablation_")?;
            res.summary("ablation")
        }
        Command::Compare { files } => {
            let loaded = files
                .iter()
                .map(|p| Ok((p.display().to_string(), read(p)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(report::render_summary(&report::compare_modes(&loaded)?))
        }
        Command::Plot { metric, file, out } => {
            let svg = report::plot_curves(&read(&file)?, &metric)?;
            match out {
                Some(p) => {
                    write_atomic(&p, &svg)?;
                    Ok(String::new())
                }
                None => Ok(svg),
            }
        }
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
