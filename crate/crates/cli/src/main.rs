//! `malthus`: experiments on age-and-size structured branching processes.
//!
//! Exit codes: 0 success, 1 configuration / IO, 2 invalid model,
//! 3 eigen solve, 4 simulation, 5 stationary profile, 6 Doeblin minorant,
//! 7 drift check.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use malthus_core::Error;

use config::{ConfigError, RunConfig};
use output::{OutDir, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "malthus", version, about)]
struct Cli {
    /// JSON config with sections model, grid, sim, doeblin, stationary, drift.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step; overrides `sim.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; falls back to MALTHUS_THREADS, then to all cores.
    #[arg(long, global = true, env = "MALTHUS_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the model assumptions and write validation.json.
    Validate,
    /// Solve for lambda_R at each truncation size.
    Eigen {
        /// Truncation size; repeat for several.
        #[arg(long = "R", short = 'R')]
        r: Vec<f64>,
        #[arg(long)]
        grid_n: Option<usize>,
    },
    /// Monte Carlo trajectories of the population.
    Simulate {
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        t_end: Option<f64>,
        /// Also write every individual at every observation time.
        #[arg(long)]
        snapshots: bool,
    },
    /// Stationary birth-size profile, pi* and the decay table.
    Stationary {
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Doeblin minorant density.
    Doeblin {
        /// Monte Carlo samples per starting point for the skeleton check.
        #[arg(long)]
        mc_samples: Option<usize>,
    },
    /// Foster-Lyapunov drift check.
    Drift {
        #[arg(long)]
        d_scale: Option<f64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Eigen { .. } => "eigen",
            Command::Simulate { .. } => "simulate",
            Command::Stationary { .. } => "stationary",
            Command::Doeblin { .. } => "doeblin",
            Command::Drift { .. } => "drift",
        }
    }

    fn failure_code(&self) -> u8 {
        match self {
            Command::Validate => 2,
            Command::Eigen { .. } => 3,
            Command::Simulate { .. } => 4,
            Command::Stationary { .. } => 5,
            Command::Doeblin { .. } => 6,
            Command::Drift { .. } => 7,
        }
    }

    fn apply(&self, cfg: &mut RunConfig) {
        match self {
            Command::Validate => {}
            Command::Eigen { r, grid_n } => {
                if !r.is_empty() {
                    cfg.grid.r = r.clone();
                }
                if let Some(n) = grid_n {
                    cfg.grid.n = *n;
                }
            }
            Command::Simulate { replicates, t_end, snapshots } => {
                if let Some(n) = replicates {
                    cfg.sim.cfg.replicates = *n;
                }
                if let Some(t) = t_end {
                    cfg.sim.cfg.t_end = *t;
                }
                cfg.sim.snapshots |= snapshots;
            }
            Command::Stationary { replicates } => {
                if let Some(n) = replicates {
                    cfg.stationary.replicates = *n;
                }
            }
            Command::Doeblin { mc_samples } => {
                if let Some(n) = mc_samples {
                    cfg.doeblin.mc_samples = *n;
                }
            }
            Command::Drift { d_scale } => {
                if let Some(s) = d_scale {
                    cfg.drift.d_scale = *s;
                }
            }
        }
    }
}

fn exit_code(cmd: &Command, err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<serde_json::Error>() || cause.is::<std::io::Error>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Io(_) | Error::Json(_) => 1,
                Error::InvalidModel(_) | Error::NonPositiveH { .. } => 2,
                _ => cmd.failure_code(),
            };
        }
    }
    cmd.failure_code()
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.sim.cfg.seed = s;
    }
    let seed = cfg.sim.cfg.seed;
    cli.command.apply(&mut cfg);
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let out = OutDir::create(&cli.out)?;
    let manifest = RunManifest {
        command: cli.command.name(),
        config_path: cli.config.as_ref().map(|p| p.display().to_string()),
        seed,
        out_dir: cli.out.display().to_string(),
        version: env!("CARGO_PKG_VERSION"),
        threads: cli.threads,
        started_at: output::unix_now(),
        config: &cfg,
    };
    out.write_json("manifest.json", &manifest)?;
    match &cli.command {
        Command::Validate => commands::validate_cmd(&cfg, &out),
        Command::Eigen { .. } => commands::eigen(&cfg, &out),
        Command::Simulate { .. } => commands::simulate(&cfg, seed, &out),
        Command::Stationary { .. } => commands::stationary(&cfg, seed, &out),
        Command::Doeblin { .. } => commands::doeblin(&cfg, seed, &out),
        Command::Drift { .. } => commands::drift(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&cli.command, &e))
        }
    }
}
