//! SGD with momentum and weight decay, two-step SAM, and noise-compensated
//! SAM (NCSAM).
//!
//! NCSAM builds the usual first-order SAM perturbation `ε̃ = ρ g/‖g‖`, then
//! adjusts it with a correction `ΔW_c = -s(t) g_n*` derived from the
//! simulated noise gradient of temporarily flipped samples:
//! `ε' = ε̃ - ΔW_c`. The descent gradient is taken at `W + ε'`.
//!
//! All three optimizers share the same descent mechanics: momentum and weight
//! decay act on the final gradient only, never on perturbation construction.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flip::{simulated_noise_gradient, FlipPlan};
use crate::model::{Batch, Model};
use crate::tensor::{GradientSet, ParameterSet};

/// Norm below which a gradient is treated as zero.
pub const ZERO_GRAD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Sam,
    Ncsam,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Sam => "sam",
            OptimizerKind::Ncsam => "ncsam",
        })
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "sam" => Ok(Self::Sam),
            "ncsam" => Ok(Self::Ncsam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupOptimizer {
    #[default]
    Sgd,
    Sam,
}

/// How `s(t)` evolves after warm-up.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Smoothstep ramp from 0, saturating at κ.
    #[default]
    Progressive,
    /// κ from the first post-warm-up epoch on.
    ConstantScale,
}

/// Missing JSON fields take the values of `OptimizerConfig::default()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// SAM radius ρ.
    pub sam_radius: f64,
    /// Upper bound κ of the compensation schedule.
    pub kappa: f64,
    /// Warm-up epochs `T_w`. Defaults to a quarter of the run.
    pub warmup_epochs: Option<usize>,
    /// Ramp length `T_r` of the schedule. Defaults to `T - T_w`.
    pub ramp_epochs: Option<usize>,
    /// Fraction γ of each mini-batch selected for flipping.
    pub flip_ratio: f64,
    pub warmup_optimizer: WarmupOptimizer,
    /// Scale `g_n*` to unit norm before applying `s(t)`.
    pub normalize_noise_grad: bool,
    /// Debug knob: `ε' = ε̃ - sign·ΔW_c`. `1` is the literal update.
    pub correction_sign: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            sam_radius: 0.05,
            kappa: 0.1,
            warmup_epochs: None,
            ramp_epochs: None,
            flip_ratio: 0.4,
            warmup_optimizer: WarmupOptimizer::Sgd,
            normalize_noise_grad: false,
            correction_sign: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.sam_radius >= 0.0 && self.sam_radius.is_finite()) {
            return bad(format!("sam_radius must be >= 0, got {}", self.sam_radius));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return bad(format!("kappa must be >= 0, got {}", self.kappa));
        }
        if !(self.flip_ratio > 0.0 && self.flip_ratio <= 1.0) {
            return bad(format!("flip_ratio must lie in (0, 1], got {}", self.flip_ratio));
        }
        if self.ramp_epochs == Some(0) {
            return bad("ramp_epochs must be >= 1".into());
        }
        if !self.correction_sign.is_finite() {
            return bad("correction_sign must be finite".into());
        }
        Ok(())
    }

    pub fn resolved_warmup(&self, total_epochs: usize) -> usize {
        self.warmup_epochs.unwrap_or(total_epochs / 4)
    }

    pub fn resolved_ramp(&self, total_epochs: usize) -> usize {
        self.ramp_epochs
            .unwrap_or_else(|| total_epochs.saturating_sub(self.resolved_warmup(total_epochs)))
            .max(1)
    }
}

/// Unscaled smoothstep curve `2 t̂² (3 - 2 t̂)` on normalized time.
pub fn schedule_raw(t_hat: f64) -> f64 {
    2.0 * t_hat * t_hat * (3.0 - 2.0 * t_hat)
}

/// `s(t) = κ · min(s_raw(t̂), 1)` with `t̂ = clamp((t - T_w) / T_r, 0, 1)`.
pub fn schedule_scale(epoch: usize, warmup_epochs: usize, ramp_epochs: usize, kappa: f64) -> f64 {
    let ramp = ramp_epochs.max(1) as f64;
    let t_hat = ((epoch as f64 - warmup_epochs as f64) / ramp).clamp(0.0, 1.0);
    kappa * schedule_raw(t_hat).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub epoch: usize,
    pub scale: f64,
}

/// Mutable state owned by one optimizer instance.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum_buffers: GradientSet,
    pub schedule: ScheduleState,
    /// First-step SAM perturbation `ε̃` of the latest step.
    pub last_perturbation: Option<GradientSet>,
    /// Correction `ΔW_c` of the latest NCSAM step.
    pub last_correction: Option<GradientSet>,
    /// Loss at the unperturbed parameters in the latest step.
    pub last_loss: f64,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet) -> Self {
        Self {
            momentum_buffers: params.zeros_like(),
            schedule: ScheduleState { epoch: 0, scale: 0.0 },
            last_perturbation: None,
            last_correction: None,
            last_loss: f64::NAN,
        }
    }

    pub fn set_schedule(&mut self, epoch: usize, scale: f64) {
        self.schedule = ScheduleState { epoch, scale };
    }
}

/// `buf ← μ·buf + (g + λ·W)`, `W' = W − η·buf`.
pub fn sgd_step(
    params: &ParameterSet,
    grad: &GradientSet,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<ParameterSet> {
    let mut buf = state.momentum_buffers.scale(config.momentum);
    buf.axpy_in_place(1.0, grad)?;
    if config.weight_decay != 0.0 {
        buf.axpy_in_place(config.weight_decay, params)?;
    }
    let next = params.axpy(-config.learning_rate, &buf)?;
    state.momentum_buffers = buf;
    Ok(next)
}

/// `ε̃ = ρ·g/‖g‖`, or zero when `‖g‖ ≤ 1e-12`.
pub fn sam_perturbation(grad: &GradientSet, radius: f64) -> GradientSet {
    let norm = grad.l2_norm();
    if norm <= ZERO_GRAD_TOL || radius == 0.0 {
        return grad.zeros_like();
    }
    grad.scale(radius / norm)
}

/// Two-step SAM: ascend to `W + ε̃`, descend with the gradient found there.
pub fn sam_step<M: Model + ?Sized>(
    model: &M,
    params: &ParameterSet,
    batch: &Batch,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<ParameterSet> {
    let (loss, g1) = model.loss_and_grad(params, batch)?;
    let eps = sam_perturbation(&g1, config.sam_radius);
    let (_, g2) = model.loss_and_grad(&params.axpy(1.0, &eps)?, batch)?;
    state.last_loss = loss;
    state.last_perturbation = Some(eps);
    state.last_correction = None;
    sgd_step(params, &g2, state, config)
}

/// `ΔW_c = −s·ĝ`, where `ĝ` is `g_n*` or its unit-norm version.
pub fn compensation_term(noise_grad: &GradientSet, scale: f64, normalize: bool) -> GradientSet {
    let norm = noise_grad.l2_norm();
    if scale == 0.0 || norm <= ZERO_GRAD_TOL {
        return noise_grad.zeros_like();
    }
    let factor = if normalize { scale / norm } else { scale };
    noise_grad.scale(-factor)
}

/// One NCSAM iteration using the current `state.schedule.scale` as `s(t)`.
///
/// The descent gradient uses the batch's observed labels; the flipped labels
/// of `plan` only feed `g_n*`.
pub fn ncsam_step<M: Model + ?Sized>(
    model: &M,
    params: &ParameterSet,
    batch: &Batch,
    plan: &FlipPlan,
    state: &mut OptimizerState,
    config: &OptimizerConfig,
) -> Result<ParameterSet> {
    let (loss, g1) = model.loss_and_grad(params, batch)?;
    let eps = sam_perturbation(&g1, config.sam_radius);
    let scale = state.schedule.scale;
    let correction = if scale > 0.0 {
        if plan.is_empty() {
            warn!("empty flip plan with s(t) = {scale}; skipping correction");
            eps.zeros_like()
        } else {
            let noise_grad = simulated_noise_gradient(model, params, batch, plan)?;
            compensation_term(&noise_grad, scale, config.normalize_noise_grad)
        }
    } else {
        eps.zeros_like()
    };
    let adjusted = eps.axpy(-config.correction_sign, &correction)?;
    let (_, g2) = model.loss_and_grad(&params.axpy(1.0, &adjusted)?, batch)?;
    state.last_loss = loss;
    state.last_perturbation = Some(eps);
    state.last_correction = Some(correction);
    sgd_step(params, &g2, state, config)
}
