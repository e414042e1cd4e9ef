//! One-axis ablation grids over flip ratio, κ, or schedule mode.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use log::info;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::optim::{OptimizerKind, ScheduleMode};

use super::config::ExperimentConfig;
use super::metrics::final_window_accuracy;
use super::run::{run_experiment, RunOutcome};

pub const SUMMARY_COLUMNS: [&str; 4] = ["axis_value", "mean", "std", "n_seeds"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    FlipRatio,
    Kappa,
    ScheduleMode,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::FlipRatio => "flip_ratio",
            AblationAxis::Kappa => "kappa",
            AblationAxis::ScheduleMode => "schedule_mode",
        }
    }

    /// Applies `value` to a copy of `base`, returning the canonical spelling
    /// used in the summary and directory names.
    fn apply(self, base: &ExperimentConfig, value: &str) -> Result<(ExperimentConfig, String)> {
        let mut cfg = base.clone();
        let value = value.trim();
        let label = match self {
            AblationAxis::FlipRatio | AblationAxis::Kappa => {
                let v: f64 = value
                    .parse()
                    .map_err(|_| Error::Config(format!("{}: {value:?} is not a number", self.name())))?;
                if self == AblationAxis::FlipRatio {
                    cfg.optimizer_config.flip_ratio = v;
                } else {
                    cfg.optimizer_config.kappa = v;
                }
                format!("{v:?}")
            }
            AblationAxis::ScheduleMode => {
                cfg.schedule_mode = match value {
                    "progressive" => ScheduleMode::Progressive,
                    "constant_scale" => ScheduleMode::ConstantScale,
                    other => return Err(Error::Config(format!("unknown schedule mode {other:?}"))),
                };
                value.to_string()
            }
        };
        cfg.name = Some(format!("{}={label}", self.name()));
        cfg.output_dir = base.output_dir.join(format!("ablation_{}", self.name()));
        cfg.validate()?;
        Ok((cfg, label))
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flip_ratio" => Ok(Self::FlipRatio),
            "kappa" => Ok(Self::Kappa),
            "schedule_mode" => Ok(Self::ScheduleMode),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis_value: String,
    /// Mean over seeds of the final-five-epoch test accuracy.
    pub mean: f64,
    /// Sample std across seeds; 0 for a single seed.
    pub std: f64,
    pub n_seeds: usize,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AblationSummary {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
    pub summary_path: PathBuf,
    pub runs: Vec<RunOutcome>,
}

pub fn summary_csv(rows: &[AblationRow]) -> String {
    let mut out = SUMMARY_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{:?},{:?},{}", r.axis_value, r.mean, r.std, r.n_seeds);
    }
    out
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Worker count for grid runs: `FLATGRAD_THREADS` if set, else all cores.
pub fn grid_threads() -> usize {
    std::env::var("FLATGRAD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every (value, seed) pair of the grid, in parallel, and writes
/// `summary.csv` next to the per-run directories.
pub fn run_ablation_grid(base: &ExperimentConfig, axis: AblationAxis, values: &[String]) -> Result<AblationSummary> {
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    if base.optimizer != OptimizerKind::Ncsam {
        return Err(Error::Config(
            "ablation grids vary NCSAM settings; set optimizer to ncsam".into(),
        ));
    }
    let configs = values.iter().map(|v| axis.apply(base, v)).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|i| base.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(grid_threads())
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    info!("ablation over {} with {} runs", axis.name(), jobs.len());
    let runs: Vec<RunOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, seed)| run_experiment(&configs[i].0, seed))
            .collect::<Result<Vec<_>>>()
    })?;

    let per_value = base.seeds.len();
    let rows: Vec<AblationRow> = configs
        .iter()
        .enumerate()
        .map(|(i, (_, label))| {
            let per_seed: Vec<f64> = runs[i * per_value..(i + 1) * per_value]
                .iter()
                .map(|r| final_window_accuracy(&r.metrics))
                .collect();
            let (mean, std) = mean_std(&per_seed);
            AblationRow {
                axis_value: label.clone(),
                mean,
                std,
                n_seeds: per_seed.len(),
                per_seed,
            }
        })
        .collect();

    let dir = base.output_dir.join(format!("ablation_{}", axis.name()));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let summary_path = dir.join("summary.csv");
    fs::write(&summary_path, summary_csv(&rows)).map_err(|e| Error::io(&summary_path, e))?;
    Ok(AblationSummary {
        axis,
        rows,
        summary_path,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn summary_schema() {
        let rows = vec![AblationRow {
            axis_value: "0.1".into(),
            mean: 0.75,
            std: 0.0,
            n_seeds: 1,
            per_seed: vec![0.75],
        }];
        assert_eq!(summary_csv(&rows), "axis_value,mean,std,n_seeds\n0.1,0.75,0.0,1\n");
    }

    #[test]
    fn axis_names_round_trip() {
        for a in [AblationAxis::FlipRatio, AblationAxis::Kappa, AblationAxis::ScheduleMode] {
            assert_eq!(a.name().parse::<AblationAxis>().unwrap(), a);
        }
        assert!("rho".parse::<AblationAxis>().is_err());
    }
}
