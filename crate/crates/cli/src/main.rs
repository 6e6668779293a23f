use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spacefill::experiment::{
    evaluate_dataset, gradcheck_samples, run_experiment, schroeder_baseline, ExperimentConfig,
    ExperimentReport, RunOptions,
};
use spacefill::{Error, MetricWeight, RegionOfInterest};

#[derive(Parser)]
#[command(
    name = "spacefill",
    version,
    about = "Space-filling input design through GP posterior variance"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a single realization for one anchor grid.
    Design {
        #[command(flatten)]
        run: RunArgs,
        /// Index into design.anchor_grids.
        #[arg(long, default_value_t = 0)]
        grid: usize,
    },
    /// Monte-Carlo batch over every anchor grid.
    Mc {
        #[command(flatten)]
        run: RunArgs,
        /// Override the number of runs per grid.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Filling distance of a CSV dataset.
    Eval {
        /// Dataset CSV, one point per row.
        #[arg(long)]
        data: PathBuf,
        /// Take region, weight and resolution from this config.
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Region lower corner (comma separated).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        lower: Option<Vec<f64>>,
        /// Region upper corner (comma separated).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        upper: Option<Vec<f64>>,
        /// Diagonal of Q; identity when omitted.
        #[arg(long, value_delimiter = ',')]
        weight: Option<Vec<f64>>,
        /// 0-based CSV columns to keep.
        #[arg(long, value_delimiter = ',')]
        columns: Option<Vec<usize>>,
        /// Evaluation points per dimension.
        #[arg(long)]
        eval_points: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients at random draws.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        grid: usize,
        #[arg(long, default_value_t = 5)]
        samples: usize,
        /// Exit with status 1 if any discrepancy exceeds this.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Filling distance of the Schroeder-phase multisine.
    Schroeder {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shared amplitude; repeat for a sweep.
        #[arg(long)]
        amplitude: Vec<f64>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("every run diverged")]
    AllDiverged,
    #[error("gradient discrepancy {worst:e} exceeds {tolerance:e}")]
    Gradient { worst: f64, tolerance: f64 },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::AllDiverged => 2,
            _ => 1,
        }
    }
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn options(args: &RunArgs, cfg: &ExperimentConfig) -> RunOptions {
    RunOptions {
        jobs: args.jobs,
        output_dir: args.out.clone().or_else(|| cfg.output_dir.clone()),
    }
}

fn print_report(report: &ExperimentReport, out: Option<&Path>) {
    if let Some(msg) = &report.advisory {
        println!("advisory: {msg}");
    }
    println!(
        "{:>6} {:>8} {:>5} {:>5} {:>9} {:>9} {:>9} {:>9}",
        "M", "epsilon", "runs", "ok", "rho0_mean", "rho_mean", "rho_med", "rho_max"
    );
    for g in &report.groups {
        let s = &g.summary;
        let init = s.initial_rho.as_ref().map_or(f64::NAN, |r| r.mean);
        let (mean, med, max) = s
            .final_rho
            .as_ref()
            .map_or((f64::NAN, f64::NAN, f64::NAN), |r| {
                (r.mean, r.median, r.max)
            });
        println!(
            "{:>6} {:>8.4} {:>5} {:>5} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            g.anchors,
            g.epsilon,
            g.runs.len(),
            s.completed,
            init,
            mean,
            med,
            max
        );
    }
    if let Some(dir) = out {
        println!("wrote {}", dir.join("report.json").display());
    }
}

fn finish(report: &ExperimentReport, opts: &RunOptions) -> Result<(), CliError> {
    print_report(report, opts.output_dir.as_deref());
    if report.all_diverged() {
        return Err(CliError::AllDiverged);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Design { run, grid } => {
            let mut cfg = load(&run.cfg)?;
            cfg.validate()?;
            let counts = cfg.design.anchor_grids.get(grid).cloned().ok_or_else(|| {
                CliError::Usage(format!(
                    "--grid {grid} is out of range ({} grids configured)",
                    cfg.design.anchor_grids.len()
                ))
            })?;
            cfg.design.anchor_grids = vec![counts];
            cfg.runs = 1;
            let opts = options(&run, &cfg);
            let report = run_experiment(&cfg, &opts)?;
            if let Some(r) = report.groups.first().and_then(|g| g.runs.first()) {
                println!(
                    "status {:?} after {} iterations, cost {:?} -> {:?}",
                    r.status, r.iterations, r.initial_cost, r.final_cost
                );
            }
            finish(&report, &opts)
        }
        Command::Mc { run, runs } => {
            let mut cfg = load(&run.cfg)?;
            if let Some(n) = runs {
                cfg.runs = n;
            }
            let opts = options(&run, &cfg);
            let report = run_experiment(&cfg, &opts)?;
            finish(&report, &opts)
        }
        Command::Eval {
            data,
            config,
            lower,
            upper,
            weight,
            columns,
            eval_points,
        } => {
            let (region, metric, points, cols) = match config {
                Some(path) => {
                    let cfg = ExperimentConfig::load(&path)?.resolved();
                    (
                        cfg.region()?,
                        cfg.metric()?,
                        cfg.design.eval_points,
                        columns,
                    )
                }
                None => {
                    let (Some(lo), Some(hi)) = (lower, upper) else {
                        return Err(CliError::Usage(
                            "eval needs --config or both --lower and --upper".into(),
                        ));
                    };
                    let region = RegionOfInterest::new(lo, hi)?;
                    let metric = match weight {
                        Some(w) => MetricWeight::new(w)?,
                        None => MetricWeight::identity(region.dim()),
                    };
                    (
                        region,
                        metric,
                        spacefill::anchors::DEFAULT_EVAL_POINTS,
                        columns,
                    )
                }
            };
            let r = evaluate_dataset(
                &data,
                cols.as_deref(),
                &region,
                &metric,
                eval_points.unwrap_or(points),
            )?;
            println!("points {}", r.points);
            println!("rho {:.6}", r.rho);
            println!("center {:?}", r.center);
            Ok(())
        }
        Command::Gradcheck {
            cfg,
            grid,
            samples,
            tolerance,
        } => {
            let cfg = load(&cfg)?;
            let errs = gradcheck_samples(&cfg, grid, samples)?;
            for (i, e) in errs.iter().enumerate() {
                println!("sample {i}: {e:.3e}");
            }
            let worst = errs.iter().copied().fold(0.0, f64::max);
            println!("worst {worst:.3e}");
            match tolerance {
                Some(tolerance) if worst >= tolerance => {
                    Err(CliError::Gradient { worst, tolerance })
                }
                _ => Ok(()),
            }
        }
        Command::Schroeder { cfg, amplitude } => {
            let cfg = load(&cfg)?;
            let amps: Vec<Option<f64>> = if amplitude.is_empty() {
                vec![None]
            } else {
                amplitude.into_iter().map(Some).collect()
            };
            for a in amps {
                let r = schroeder_baseline(&cfg, a)?;
                println!(
                    "amplitude {} rho {:.6} center {:?}",
                    r.amplitude, r.rho, r.center
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
