//! The training loop: warm-up with a plain optimizer, then NCSAM (or the SGD
//! and SAM baselines) with per-epoch metrics and diagnostics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::{generate_gaussian_blobs, generate_two_moons, load_idx, stratified_split};
use crate::diagnostics::{
    deviation_proxy, distortion_report, empirical_gradient_split, gaussian_kl, pac_penalty, sharpness_estimate,
    GaussianPacConfig,
};
use crate::error::{Error, Result};
use crate::flip::build_flip_plan;
use crate::model::{Batch, Mlp, MlpSpec, Model};
use crate::noise::{NoiseKind, NoisyDataset, ObservedLabels};
use crate::optim::{
    ncsam_step, sam_step, schedule_scale, sgd_step, OptimizerConfig, OptimizerKind, OptimizerState, ScheduleMode,
    WarmupOptimizer,
};
use crate::rng::{self, Stream};
use crate::tensor::{ParameterSet, Tensor};

use super::config::{DatasetConfig, ExperimentConfig};
use super::metrics::{write_metrics, EpochMetrics};

/// Train/test data with known corruption of the training labels.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub classes: usize,
    pub train_x: Tensor,
    pub train_true: Vec<usize>,
    /// Hard observed labels (row argmax for soft labels).
    pub train_observed: Vec<usize>,
    pub train_soft: Option<Tensor>,
    pub corrupted: Vec<bool>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
}

impl PreparedData {
    pub fn train_len(&self) -> usize {
        self.train_true.len()
    }

    /// The same data with every training label restored to the truth.
    pub fn clean_twin(&self) -> Self {
        Self {
            train_observed: self.train_true.clone(),
            train_soft: None,
            corrupted: vec![false; self.train_len()],
            ..self.clone()
        }
    }

    fn batch(&self, rows: &[usize]) -> Result<Batch> {
        let batch = Batch::gather(&self.train_x, &self.train_observed, rows)?;
        match &self.train_soft {
            Some(soft) => batch.with_soft_targets(soft.select_rows(rows)?),
            None => Ok(batch),
        }
    }
}

fn split_rows(x: &Tensor, y: &[usize], rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    Ok((x.select_rows(rows)?, rows.iter().map(|&r| y[r]).collect()))
}

fn model_spec(cfg: &ExperimentConfig, input_dim: usize, classes: usize, init_seed: u64) -> Result<MlpSpec> {
    let mut widths = vec![input_dim];
    widths.extend_from_slice(&cfg.model.hidden);
    widths.push(classes);
    let mut spec = MlpSpec::new(widths, init_seed)?;
    spec.activation = cfg.model.activation;
    Ok(spec)
}

/// Short clean-label SGD fit used to score per-sample difficulty for
/// instance-dependent noise.
fn fit_probe(
    cfg: &ExperimentConfig,
    x: &Tensor,
    y: &[usize],
    classes: usize,
    seed: u64,
) -> Result<(Mlp, ParameterSet)> {
    let mlp = Mlp::new(model_spec(cfg, x.cols(), classes, seed)?)?;
    let mut params = mlp.init_params()?;
    let opt = OptimizerConfig {
        learning_rate: 0.05,
        momentum: 0.9,
        weight_decay: 0.0,
        ..OptimizerConfig::default()
    };
    let mut state = OptimizerState::new(&params);
    let mut order: Vec<usize> = (0..y.len()).collect();
    let mut rng = rng::seeded(seed);
    for _ in 0..cfg.probe_epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(cfg.batch_size.min(y.len())) {
            let batch = Batch::gather(x, y, rows)?;
            let (_, g) = mlp.loss_and_grad(&params, &batch)?;
            params = sgd_step(&params, &g, &mut state, &opt)?;
        }
    }
    Ok((mlp, params))
}

/// Generates or loads the dataset, splits it and corrupts the training labels.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let data_seed = rng::derive_seed(seed, Stream::Data);
    let mut split_rng = rng::stream(seed, Stream::Split);
    let (train_x, train_true, test_x, test_y, classes) = match &cfg.dataset {
        DatasetConfig::TwoMoons { n, noise_std } => {
            let (x, y) = generate_two_moons(*n, *noise_std, data_seed)?;
            let s = stratified_split(&y, 2, 0.8, &mut split_rng);
            let (trx, try_) = split_rows(&x, &y, &s.train)?;
            let (tex, tey) = split_rows(&x, &y, &s.test)?;
            (trx, try_, tex, tey, 2)
        }
        DatasetConfig::GaussianBlobs {
            n,
            dim,
            classes,
            separation,
        } => {
            let (x, y) = generate_gaussian_blobs(*n, *dim, *classes, *separation, data_seed)?;
            let s = stratified_split(&y, *classes, 0.8, &mut split_rng);
            let (trx, try_) = split_rows(&x, &y, &s.train)?;
            let (tex, tey) = split_rows(&x, &y, &s.test)?;
            (trx, try_, tex, tey, *classes)
        }
        DatasetConfig::IdxFiles {
            train_images,
            train_labels,
            test_images,
            test_labels,
            limit,
        } => {
            let (mut x, mut y) = load_idx(train_images, train_labels)?;
            if let Some(limit) = limit {
                let keep: Vec<usize> = (0..y.len().min(*limit)).collect();
                (x, y) = split_rows(&x, &y, &keep)?;
            }
            match (test_images, test_labels) {
                (Some(ti), Some(tl)) => {
                    let (tx, ty) = load_idx(ti, tl)?;
                    (x, y, tx, ty, 10)
                }
                _ => {
                    let s = stratified_split(&y, 10, 0.8, &mut split_rng);
                    let (trx, try_) = split_rows(&x, &y, &s.train)?;
                    let (tex, tey) = split_rows(&x, &y, &s.test)?;
                    (trx, try_, tex, tey, 10)
                }
            }
        }
    };
    if cfg.batch_size > train_true.len() {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} training samples",
            cfg.batch_size,
            train_true.len()
        )));
    }

    let noise_seed = cfg.noise.seed.unwrap_or_else(|| rng::derive_seed(seed, Stream::Noise));
    let probe = if cfg.noise.kind == NoiseKind::InstanceDependent && cfg.noise.rate > 0.0 {
        Some(fit_probe(cfg, &train_x, &train_true, classes, noise_seed)?)
    } else {
        None
    };
    let noisy = NoisyDataset::build(
        train_x,
        train_true,
        classes,
        &cfg.noise,
        noise_seed,
        probe.as_ref().map(|(m, p)| (m, p)),
    )?;
    let train_observed = noisy.hard_labels();
    let train_soft = match noisy.observed {
        ObservedLabels::Soft(t) => Some(t),
        ObservedLabels::Hard(_) => None,
    };
    Ok(PreparedData {
        classes,
        train_x: noisy.features,
        train_true: noisy.true_labels,
        train_observed,
        train_soft,
        corrupted: noisy.corrupted,
        test_x,
        test_y,
    })
}

fn accuracy(pred: &[usize], truth: &[usize], rows: impl Iterator<Item = usize>) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for r in rows {
        total += 1;
        hit += usize::from(pred[r] == truth[r]);
    }
    if total == 0 {
        f64::NAN
    } else {
        hit as f64 / total as f64
    }
}

/// One flip-plan entry for flips.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipLogRow {
    pub epoch: usize,
    pub batch: usize,
    pub sample_index: usize,
    pub gap: f64,
    pub flipped_label: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub metrics: Vec<EpochMetrics>,
    pub final_params: ParameterSet,
    /// End-of-epoch parameters, when requested.
    pub snapshots: Vec<ParameterSet>,
    pub flips: Vec<FlipLogRow>,
    pub sharpness: Vec<f64>,
    pub timings: Vec<f64>,
}

/// The optimizer actually stepping at `epoch`.
fn step_kind(cfg: &ExperimentConfig, epoch: usize) -> OptimizerKind {
    match cfg.optimizer {
        OptimizerKind::Ncsam if epoch < cfg.warmup_epochs() => match cfg.optimizer_config.warmup_optimizer {
            WarmupOptimizer::Sgd => OptimizerKind::Sgd,
            WarmupOptimizer::Sam => OptimizerKind::Sam,
        },
        k => k,
    }
}

/// Compensation scale `s(t)` in effect at `epoch` (zero outside NCSAM).
pub fn epoch_scale(cfg: &ExperimentConfig, epoch: usize) -> f64 {
    if step_kind(cfg, epoch) != OptimizerKind::Ncsam {
        return 0.0;
    }
    let kappa = cfg.optimizer_config.kappa;
    match cfg.schedule_mode {
        ScheduleMode::Progressive => schedule_scale(epoch, cfg.warmup_epochs(), cfg.ramp_epochs(), kappa),
        ScheduleMode::ConstantScale => kappa,
    }
}

/// Runs the epoch loop for one seed. Epochs are numbered from 0; epochs
/// `t < T_w` use the warm-up optimizer when the run is NCSAM.
pub fn train(cfg: &ExperimentConfig, seed: u64, data: &PreparedData, keep_snapshots: bool) -> Result<TrainOutput> {
    let n = data.train_len();
    let mlp = Mlp::new(model_spec(
        cfg,
        data.train_x.cols(),
        data.classes,
        rng::derive_seed(seed, Stream::Init),
    )?)?;
    let mut params = mlp.init_params()?;
    let mut state = OptimizerState::new(&params);
    let mut shuffle_rng = rng::stream(seed, Stream::Shuffle);
    let mut flip_rng = rng::stream(seed, Stream::Flip);
    let mut sharp_rng = rng::stream(seed, Stream::Sharpness);
    let pac_cfg = GaussianPacConfig {
        prior_std: cfg.diagnostics.prior_std,
        posterior_std: cfg.diagnostics.posterior_std,
        perturbation_std: cfg.perturbation_std(),
        sample_count: n.max(2),
        param_dim: params.param_count(),
    };
    let probe_rows: Vec<usize> = (0..n.min(256)).collect();
    let clean_rows: Vec<usize> = (0..n).filter(|&i| !data.corrupted[i]).collect();
    let noisy_rows: Vec<usize> = (0..n).filter(|&i| data.corrupted[i]).collect();

    let mut out = TrainOutput {
        metrics: Vec::with_capacity(cfg.epochs),
        final_params: params.clone(),
        snapshots: Vec::new(),
        flips: Vec::new(),
        sharpness: Vec::new(),
        timings: Vec::new(),
    };
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let kind = step_kind(cfg, epoch);
        let scale = epoch_scale(cfg, epoch);
        state.set_schedule(epoch, scale);
        let opt = OptimizerConfig {
            learning_rate: cfg.optimizer_config.learning_rate * cfg.lr_schedule.factor_at(epoch, cfg.epochs),
            ..cfg.optimizer_config.clone()
        };

        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut eps_sum, mut corr_sum) = (0.0, 0.0, 0.0);
        let (mut cos_sum, mut cos_count) = (0.0, 0usize);
        let mut batches = 0usize;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.batch(rows)?;
            if cfg.diagnostics.distortion {
                let mask: Vec<bool> = rows.iter().map(|&r| data.corrupted[r]).collect();
                let split = empirical_gradient_split(&mlp, &params, &batch, &mask)?;
                if !split.clean_empty() && !split.noise_empty() {
                    if let Ok(report) = distortion_report(&split.clean, &split.noise) {
                        cos_sum += report.cos_theta;
                        cos_count += 1;
                    }
                }
            }
            params = match kind {
                OptimizerKind::Sgd => {
                    let (loss, g) = mlp.loss_and_grad(&params, &batch)?;
                    state.last_loss = loss;
                    state.last_perturbation = None;
                    state.last_correction = None;
                    sgd_step(&params, &g, &mut state, &opt)?
                }
                OptimizerKind::Sam => sam_step(&mlp, &params, &batch, &mut state, &opt)?,
                OptimizerKind::Ncsam => {
                    let plan = build_flip_plan(&mlp, &params, &batch, opt.flip_ratio, &mut flip_rng)?;
                    if cfg.log_flips {
                        for (i, &s) in plan.selected.iter().enumerate() {
                            out.flips.push(FlipLogRow {
                                epoch,
                                batch: b,
                                sample_index: s,
                                gap: plan.gaps[i],
                                flipped_label: plan.flipped_labels[i],
                            });
                        }
                    }
                    ncsam_step(&mlp, &params, &batch, &plan, &mut state, &opt)?
                }
            };
            loss_sum += state.last_loss;
            eps_sum += state.last_perturbation.as_ref().map_or(0.0, |e| e.l2_norm());
            corr_sum += state.last_correction.as_ref().map_or(0.0, |c| c.l2_norm());
            batches += 1;
        }
        if !params.is_finite() {
            return Err(Error::Degenerate(format!("parameters diverged at epoch {epoch}")));
        }

        let train_pred = mlp.predict(&params, &data.train_x)?;
        let test_pred = mlp.predict(&params, &data.test_x)?;
        let sq_norm = params.l2_norm_sq();
        let nb = batches as f64;
        let row = EpochMetrics {
            epoch,
            train_loss: loss_sum / nb,
            train_acc: accuracy(&train_pred, &data.train_observed, 0..n),
            test_acc: accuracy(&test_pred, &data.test_y, 0..data.test_y.len()),
            clean_subset_acc: accuracy(&train_pred, &data.train_true, clean_rows.iter().copied()),
            noisy_subset_acc: accuracy(&train_pred, &data.train_true, noisy_rows.iter().copied()),
            schedule_scale: scale,
            mean_perturbation_norm: eps_sum / nb,
            mean_correction_norm: corr_sum / nb,
            mean_cos_theta: if cos_count > 0 {
                cos_sum / cos_count as f64
            } else {
                f64::NAN
            },
            kl_diag: gaussian_kl(sq_norm, &pac_cfg)?,
            pac_penalty: pac_penalty(sq_norm, &pac_cfg)?,
            wall_seconds: 0.0,
        };
        if cfg.diagnostics.sharpness_trials > 0 {
            let probe = data.batch(&probe_rows)?;
            out.sharpness.push(sharpness_estimate(
                &mlp,
                &params,
                &probe,
                cfg.optimizer_config.sam_radius,
                cfg.diagnostics.sharpness_trials,
                &mut sharp_rng,
            )?);
        }
        let elapsed = started.elapsed().as_secs_f64();
        out.timings.push(elapsed);
        debug!(
            "epoch {epoch}: loss {:.4} test_acc {:.4} s(t) {:.4}",
            row.train_loss, row.test_acc, row.schedule_scale
        );
        out.metrics.push(EpochMetrics {
            wall_seconds: if cfg.record_wall_clock { elapsed } else { 0.0 },
            ..row
        });
        if keep_snapshots {
            out.snapshots.push(params.clone());
        }
    }
    out.final_params = params;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub seed: u64,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Serialize)]
struct ParamsSidecar<'a> {
    format: &'static str,
    entries: Vec<(&'a str, &'a [usize])>,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the parameters as little-endian `f64` in entry order, with a JSON
/// sidecar listing names and shapes.
pub fn write_params(dir: &Path, stem: &str, params: &ParameterSet) -> Result<()> {
    let mut bytes = Vec::with_capacity(params.param_count() * 8);
    for v in params.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(&dir.join(format!("{stem}.bin")), bytes)?;
    let sidecar = ParamsSidecar {
        format: "f64-le",
        entries: params.entries().iter().map(|(n, t)| (n.as_str(), t.shape())).collect(),
    };
    let mut json = serde_json::to_string_pretty(&sidecar)?;
    json.push('\n');
    write_file(&dir.join(format!("{stem}.json")), json)
}

pub fn run_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("{}-seed{seed}", cfg.run_label()))
}

/// Trains one seed and writes the run directory: `config.json`,
/// `metrics.csv`, `final_params.{bin,json}`, `timings.csv`, and optionally
/// `flips.csv`, `sharpness.csv`, `deviation.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg, seed)?;
    let dir = run_dir(cfg, seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    info!("training {} seed {seed} -> {}", cfg.run_label(), dir.display());

    let echo = ExperimentConfig {
        seeds: vec![seed],
        ..cfg.clone()
    };
    write_file(&dir.join("config.json"), echo.to_json()?)?;

    let twin = cfg.diagnostics.clean_twin;
    let output = train(cfg, seed, &data, twin)?;
    write_metrics(&dir.join("metrics.csv"), &output.metrics)?;
    write_params(&dir, "final_params", &output.final_params)?;

    let mut timings = String::from("epoch,wall_seconds\n");
    for (e, t) in output.timings.iter().enumerate() {
        let _ = writeln!(timings, "{e},{t:?}");
    }
    write_file(&dir.join("timings.csv"), timings)?;

    if cfg.log_flips {
        let mut s = String::from("epoch,batch,sample_index,gap,flipped_label\n");
        for f in &output.flips {
            let _ = writeln!(
                s,
                "{},{},{},{:?},{}",
                f.epoch, f.batch, f.sample_index, f.gap, f.flipped_label
            );
        }
        write_file(&dir.join("flips.csv"), s)?;
    }
    if !output.sharpness.is_empty() {
        let mut s = String::from("epoch,sharpness\n");
        for (e, v) in output.sharpness.iter().enumerate() {
            let _ = writeln!(s, "{e},{v:?}");
        }
        write_file(&dir.join("sharpness.csv"), s)?;
    }
    if twin {
        let clean = train(cfg, seed, &data.clean_twin(), true)?;
        let mut s = String::from("epoch,deviation_norm\n");
        for (e, (a, b)) in output.snapshots.iter().zip(&clean.snapshots).enumerate() {
            let _ = writeln!(s, "{e},{:?}", deviation_proxy(a, b)?);
        }
        write_file(&dir.join("deviation.csv"), s)?;
    }
    Ok(RunOutcome {
        dir,
        seed,
        metrics: output.metrics,
    })
}

/// Runs every seed listed in the config, in order.
pub fn run_all_seeds(cfg: &ExperimentConfig) -> Result<Vec<RunOutcome>> {
    cfg.seeds.iter().map(|&s| run_experiment(cfg, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(optimizer: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{
                "dataset": {{"kind": "gaussian_blobs", "n": 200, "dim": 4, "classes": 3, "separation": 3.0}},
                "noise": {{"kind": "symmetric", "rate": 0.3}},
                "model": {{"hidden": [8]}},
                "optimizer": "{optimizer}",
                "optimizer_config": {{"learning_rate": 0.05, "sam_radius": 0.05, "kappa": 0.2, "warmup_epochs": 2}},
                "epochs": 6,
                "batch_size": 32,
                "output_dir": "unused"
            }}"#
        ))
        .unwrap()
    }

    #[test]
    fn warmup_has_no_correction_and_schedule_rises() {
        let c = cfg("ncsam");
        let data = prepare_data(&c, 1).unwrap();
        let out = train(&c, 1, &data, false).unwrap();
        for row in &out.metrics[..2] {
            assert_eq!(row.schedule_scale, 0.0);
            assert_eq!(row.mean_correction_norm, 0.0);
        }
        let scales: Vec<f64> = out.metrics.iter().map(|m| m.schedule_scale).collect();
        assert!(scales.windows(2).all(|w| w[1] >= w[0]));
        assert!(out.metrics[4].mean_correction_norm > 0.0);
    }

    #[test]
    fn prepared_data_is_deterministic_and_masked() {
        let c = cfg("sgd");
        let a = prepare_data(&c, 3).unwrap();
        let b = prepare_data(&c, 3).unwrap();
        assert_eq!(a.train_observed, b.train_observed);
        assert_eq!(a.train_x, b.train_x);
        assert_eq!(a.train_len() + a.test_y.len(), 200);
        assert!((155..=165).contains(&a.train_len()));
        for i in 0..a.train_len() {
            assert_eq!(a.corrupted[i], a.train_observed[i] != a.train_true[i]);
        }
    }

    #[test]
    fn oversized_batch_is_a_config_error() {
        let mut c = cfg("sgd");
        c.batch_size = 1000;
        assert!(matches!(prepare_data(&c, 0), Err(Error::Config(_))));
    }
}
