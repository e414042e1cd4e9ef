use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use flatgrad::harness::{
    emit_plots, final_window_accuracy, run_ablation_grid, run_experiment, AblationAxis, ExperimentConfig,
};
use flatgrad::optim::OptimizerKind;

#[derive(Parser)]
#[command(
    name = "flatgrad",
    version,
    about = "Noise-compensated sharpness-aware training harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration for every configured seed (or just --seed).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the optimizer: sgd, sam or ncsam.
        #[arg(long)]
        optimizer: Option<String>,
        /// Write flips.csv with every simulated label flip.
        #[arg(long)]
        log_flips: bool,
    },
    /// Sweep one NCSAM setting and summarize final test accuracy.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// flip_ratio, kappa or schedule_mode.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 0.0,0.1,0.3.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Render SVG charts from one or more run directories.
    Plot {
        /// Run directory containing metrics.csv; repeat to compare runs.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Where to write the SVGs; defaults to the first run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path, out: Option<PathBuf>, optimizer: Option<String>) -> flatgrad::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(name) = optimizer {
        cfg.optimizer = name.parse::<OptimizerKind>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: Command) -> flatgrad::Result<()> {
    match command {
        Command::Train {
            config,
            seed,
            out,
            optimizer,
            log_flips,
        } => {
            let mut cfg = load_config(&config, out, optimizer)?;
            cfg.log_flips |= log_flips;
            let seeds = seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
            for s in seeds {
                let outcome = run_experiment(&cfg, s)?;
                println!(
                    "{}\tfinal5_test_acc={:.4}",
                    outcome.dir.display(),
                    final_window_accuracy(&outcome.metrics)
                );
            }
        }
        Command::Ablate { config, axis, values } => {
            let cfg = load_config(&config, None, None)?;
            let axis: AblationAxis = axis.parse()?;
            let summary = run_ablation_grid(&cfg, axis, &values)?;
            for row in &summary.rows {
                println!(
                    "{}={}\tmean={:.4}\tstd={:.4}\tn_seeds={}",
                    axis.name(),
                    row.axis_value,
                    row.mean,
                    row.std,
                    row.n_seeds
                );
            }
            println!("{}", summary.summary_path.display());
        }
        Command::Plot { runs, out } => {
            let out = out.unwrap_or_else(|| runs[0].clone());
            for path in emit_plots(&runs, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 1 })
        }
    }
}
