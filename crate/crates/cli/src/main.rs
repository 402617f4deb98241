use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use local_games::config::{Cell, Config};
use local_games::harness::{
    aggregate, compute_metrics, make_scenario, metrics_csv, read_metrics, run, scheme_label, summary_csv, trajectory_csv, write_atomic,
    MetricsRow,
};
use local_games::selection::SelectionScheme;
use local_games::Error;
use rayon::prelude::*;

/// Receding-horizon local games: run and sweep closed-loop experiments.
#[derive(Debug, Parser)]
#[command(name = "local-games", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one (scheme, p) cell over the configured seeds.
    Run(RunArgs),
    /// Run every (scheme, p) cell and write per-run metrics and a summary.
    Sweep(RunArgs),
    /// Check a config file and exit.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recompute summary.csv from an existing metrics.csv.
    ReplayMetrics {
        /// metrics file written by `run` or `sweep`
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// First seed; overrides `scenario.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Comma-separated scheme labels, e.g. `nn,cbf`.
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<String>>,
    /// Comma-separated player counts.
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<usize>>,
}

enum Failure {
    Config(Error),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => execute(&args, false),
        Command::Sweep(args) => execute(&args, true),
        Command::ValidateConfig { config } => load(&config).map(|_| log::info!("{} is valid", config.display())),
        Command::ReplayMetrics { metrics, out } => replay(&metrics, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            log::error!("{e}");
            ExitCode::from(3)
        }
        Err(Failure::Run(msg)) => {
            log::error!("{msg}");
            ExitCode::from(1)
        }
    }
}

fn load(path: &Path) -> Result<Config, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))?;
    let config = Config::parse(&text)?;
    config.validate()?;
    Ok(config)
}

fn cli_error(flag: &str, message: impl Into<String>) -> Failure {
    Failure::Config(Error::Config { path: flag.into(), message: message.into() })
}

fn execute(args: &RunArgs, sweep: bool) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Failure::Run(format!("{}: {e}", args.config.display())))?;
    let mut config = Config::parse(&text)?;
    if let Some(seed) = args.seed {
        config.scenario.seed = seed;
    }
    let schemes = match &args.schemes {
        Some(labels) => labels
            .iter()
            .map(|s| s.parse::<SelectionScheme>().map_err(|e| cli_error("--schemes", e.to_string())))
            .collect::<Result<Vec<_>, _>>()?,
        None => config.schemes()?,
    };
    config.validate_for(&schemes)?;
    let ps = args.p.clone().unwrap_or_else(|| config.sweep.p.clone());
    if ps.is_empty() {
        return Err(cli_error("--p", "no player counts given"));
    }
    let cells = if sweep {
        config.cells(&schemes, &ps)?
    } else {
        let (Some(&scheme), Some(&p)) = (schemes.first(), ps.first()) else {
            return Err(cli_error("--schemes", "no scheme given"));
        };
        if schemes.len() > 1 || ps.len() > 1 {
            return Err(cli_error("--schemes", "`run` takes a single scheme and p; use `sweep` for several"));
        }
        vec![Cell { scheme: Some(scheme), p }]
    };

    let scenario = config.scenario_config()?;
    let seeds = config.seeds();
    let jobs: Vec<(Cell, u64)> = cells.iter().flat_map(|&c| seeds.iter().map(move |&s| (c, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs.unwrap_or(0)).build().map_err(|e| Failure::Run(e.to_string()))?;
    log::info!("{} runs ({} cells x {} seeds) on {} threads", jobs.len(), cells.len(), seeds.len(), pool.current_num_threads());

    let outcomes: Vec<Result<(MetricsRow, Option<Vec<u8>>), String>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(cell, seed)| {
                let label = format!("{} p={} seed={seed}", scheme_label(cell.scheme), cell.p);
                let scen = make_scenario(&scenario, seed).map_err(|e| format!("{label}: {e}"))?;
                let planners = vec![config.planner_config(cell); scen.ids.len()];
                let record = run(&scenario, &scen, &planners, seed).map_err(|e| format!("{label}: {e}"))?;
                if let Some(reason) = &record.failure {
                    return Err(format!("{label}: {reason}"));
                }
                let metrics =
                    compute_metrics(&scenario.dynamics, &record, scenario.repulsion_radius).map_err(|e| format!("{label}: {e}"))?;
                log::info!("{label}: normalized min distance {:.4}", metrics.normalized_min_distance);
                let trajectory = if config.output.trajectories {
                    Some(trajectory_csv(&scenario.dynamics, &record).map_err(|e| format!("{label}: {e}"))?)
                } else {
                    None
                };
                Ok((MetricsRow::new(&record, &metrics, config.output.record_wall_time), trajectory))
            })
            .collect()
    });

    let mut rows = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for ((cell, seed), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok((row, trajectory)) => {
                if let Some(bytes) = trajectory {
                    let name = format!("{}_p{}_seed{seed}.csv", scheme_label(cell.scheme), cell.p);
                    write_atomic(&args.out.join("trajectories").join(name), &bytes)?;
                }
                rows.push(row);
            }
            Err(msg) => {
                log::error!("{msg}");
                failures.push(msg);
            }
        }
    }
    if !rows.is_empty() {
        write_atomic(&args.out.join("metrics.csv"), &metrics_csv(&rows)?)?;
        if sweep {
            write_atomic(&args.out.join("summary.csv"), &summary_csv(&aggregate(&rows)?)?)?;
        }
    }
    if failures.is_empty() {
        log::info!("wrote {}", args.out.display());
        Ok(())
    } else {
        Err(Failure::Run(format!("{} of {} runs failed", failures.len(), jobs.len())))
    }
}

fn replay(metrics: &Path, out: &Path) -> Result<(), Failure> {
    let rows = read_metrics(metrics)?;
    write_atomic(&out.join("summary.csv"), &summary_csv(&aggregate(&rows)?)?)?;
    log::info!("{} rows summarized into {}", rows.len(), out.join("summary.csv").display());
    Ok(())
}
