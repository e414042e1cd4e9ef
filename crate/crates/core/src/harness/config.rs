//! JSON experiment configuration. Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Activation;
use crate::noise::NoiseSpec;
use crate::optim::{OptimizerConfig, OptimizerKind, ScheduleMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    TwoMoons {
        /// Total sample count before the 80/20 split.
        n: usize,
        noise_std: f64,
    },
    GaussianBlobs {
        n: usize,
        dim: usize,
        classes: usize,
        /// Distance between cluster centers, in units of the (unit) cluster std.
        separation: f64,
    },
    IdxFiles {
        train_images: PathBuf,
        train_labels: PathBuf,
        /// Without a test pair, the training files are split 80/20.
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        /// Keep only the first `limit` training samples.
        #[serde(default)]
        limit: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_factor() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    StepDecay {
        /// Epochs at which the rate is multiplied by `factor`. Defaults to
        /// 50% and 75% of the run.
        #[serde(default)]
        milestones: Option<Vec<usize>>,
        #[serde(default = "default_factor")]
        factor: f64,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::StepDecay {
            milestones: None,
            factor: default_factor(),
        }
    }
}

impl LrSchedule {
    /// Multiplier applied to the base learning rate at `epoch`.
    pub fn factor_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::StepDecay { milestones, factor } => {
                let defaults = [total_epochs / 2, total_epochs * 3 / 4];
                let ms: &[usize] = milestones.as_deref().unwrap_or(&defaults);
                let passed = ms.iter().filter(|&&m| epoch >= m).count() as i32;
                factor.powi(passed)
            }
        }
    }
}

fn one() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_probe_epochs() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default = "one")]
    pub prior_std: f64,
    #[serde(default = "one")]
    pub posterior_std: f64,
    /// Std of the Gaussian SAM perturbation; defaults to the SAM radius.
    #[serde(default)]
    pub perturbation_std: Option<f64>,
    /// Per-batch clean/noise gradient split feeding `mean_cos_theta`.
    #[serde(default = "default_true")]
    pub distortion: bool,
    /// Random directions per epoch for `sharpness.csv`; 0 disables it.
    #[serde(default)]
    pub sharpness_trials: usize,
    /// Train a twin on true labels and write `deviation.csv`.
    #[serde(default)]
    pub clean_twin: bool,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            prior_std: 1.0,
            posterior_std: 1.0,
            perturbation_std: None,
            distortion: true,
            sharpness_trials: 0,
            clean_twin: false,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run label used in plot legends and summary files.
    #[serde(default)]
    pub name: Option<String>,
    pub dataset: DatasetConfig,
    #[serde(default = "NoiseSpec::none")]
    pub noise: NoiseSpec,
    pub model: ModelConfig,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub optimizer_config: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub schedule_mode: ScheduleMode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub log_flips: bool,
    /// Fill the `wall_seconds` column. Off by default so that metrics.csv is
    /// byte-reproducible; timings always go to timings.csv.
    #[serde(default)]
    pub record_wall_clock: bool,
    /// Epochs of clean-label SGD for the instance-dependent noise probe.
    #[serde(default = "default_probe_epochs")]
    pub probe_epochs: usize,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn warmup_epochs(&self) -> usize {
        self.optimizer_config.resolved_warmup(self.epochs)
    }

    pub fn ramp_epochs(&self) -> usize {
        self.optimizer_config.resolved_ramp(self.epochs)
    }

    pub fn perturbation_std(&self) -> f64 {
        self.diagnostics
            .perturbation_std
            .unwrap_or(self.optimizer_config.sam_radius)
    }

    pub fn run_label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.optimizer.to_string())
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        self.optimizer_config.validate()?;
        if self.optimizer == OptimizerKind::Ncsam && self.warmup_epochs() >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs(),
                self.epochs
            ));
        }
        if self.model.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if let LrSchedule::StepDecay { factor, .. } = &self.lr_schedule {
            if !(*factor > 0.0 && *factor <= 1.0) {
                return bad(format!("step decay factor must lie in (0, 1], got {factor}"));
            }
        }
        let d = &self.diagnostics;
        if !(d.prior_std > 0.0 && d.posterior_std > 0.0) {
            return bad("diagnostics stds must be positive".into());
        }
        if d.perturbation_std.is_some_and(|b| !(b >= 0.0)) {
            return bad("perturbation_std must be >= 0".into());
        }
        let classes = match &self.dataset {
            DatasetConfig::TwoMoons { n, noise_std } => {
                if *n < 10 || !(*noise_std >= 0.0) {
                    return bad("two_moons needs n >= 10 and noise_std >= 0".into());
                }
                2
            }
            DatasetConfig::GaussianBlobs {
                n,
                dim,
                classes,
                separation,
            } => {
                if *classes < 2 || *n < 5 * classes || *dim == 0 || !(*separation >= 0.0) {
                    return bad("gaussian_blobs needs C >= 2, n >= 5C, dim >= 1, separation >= 0".into());
                }
                *classes
            }
            DatasetConfig::IdxFiles {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [
                    Some(train_images),
                    Some(train_labels),
                    test_images.as_ref(),
                    test_labels.as_ref(),
                ]
                .into_iter()
                .flatten()
                {
                    if !p.exists() {
                        return bad(format!("file {} does not exist", p.display()));
                    }
                }
                if test_images.is_some() != test_labels.is_some() {
                    return bad("test_images and test_labels go together".into());
                }
                10
            }
        };
        self.noise
            .validate(classes)
            .map_err(|e| Error::Config(format!("noise: {e}")))?;
        Ok(())
    }
}
