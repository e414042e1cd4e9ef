//! Per-epoch diagnostics: Gaussian PAC-Bayes quantities, perturbation
//! distortion under noisy gradients, and a sharpness probe.
//!
//! The PAC-Bayes penalty drops all hidden constants, so it is a trend
//! indicator only. None of these numbers certify a bound.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::optim::sam_perturbation;
use crate::rng::Rng;
use crate::tensor::{GradientSet, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPacConfig {
    /// Prior `P = N(0, σ_p² I)`.
    pub prior_std: f64,
    /// Posterior `Q = N(w + Δw, σ_q² I)`.
    pub posterior_std: f64,
    /// Std of the Gaussian SAM perturbation.
    pub perturbation_std: f64,
    /// Training-set size `n`.
    pub sample_count: usize,
    /// Parameter dimension `k`.
    pub param_dim: usize,
}

impl GaussianPacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior_std > 0.0 && self.posterior_std > 0.0) {
            return Err(Error::InvalidArgument(
                "prior and posterior std must be positive".into(),
            ));
        }
        if !(self.perturbation_std >= 0.0) {
            return Err(Error::InvalidArgument("perturbation std must be nonnegative".into()));
        }
        if self.sample_count < 2 || self.param_dim < 1 {
            return Err(Error::InvalidArgument("need n >= 2 and k >= 1".into()));
        }
        Ok(())
    }
}

/// `KL(Q‖P) = ½(‖w+Δw‖²/σ_p² + k(σ_q²/σ_p² − 1 − ln(σ_q²/σ_p²)))`.
pub fn gaussian_kl(mean_sq_norm: f64, cfg: &GaussianPacConfig) -> Result<f64> {
    cfg.validate()?;
    if !(mean_sq_norm >= 0.0) {
        return Err(Error::InvalidArgument("squared norm must be nonnegative".into()));
    }
    let ratio = (cfg.posterior_std / cfg.prior_std).powi(2);
    let trace_term = cfg.param_dim as f64 * (ratio - 1.0 - ratio.ln());
    Ok(0.5 * (mean_sq_norm / (cfg.prior_std * cfg.prior_std) + trace_term.max(0.0)))
}

/// `sqrt((‖w+Δw‖² + k β²) / n)`.
pub fn pac_penalty(mean_sq_norm: f64, cfg: &GaussianPacConfig) -> Result<f64> {
    cfg.validate()?;
    if !(mean_sq_norm >= 0.0) {
        return Err(Error::InvalidArgument("squared norm must be nonnegative".into()));
    }
    let beta = cfg.perturbation_std;
    Ok(((mean_sq_norm + cfg.param_dim as f64 * beta * beta) / cfg.sample_count as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    OverPerturbation,
    UnderPerturbation,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    /// Cosine between the clean and the biased gradient direction.
    pub cos_theta: f64,
    pub clean_norm: f64,
    pub noise_norm: f64,
    pub biased_norm: f64,
    /// `⟨g_clean, g_noise⟩`.
    pub inner_product: f64,
    pub regime: Regime,
}

/// How label noise rotates and rescales the SAM ascent direction, given the
/// clean and noise components of a gradient.
pub fn distortion_report(g_clean: &GradientSet, g_noise: &GradientSet) -> Result<DistortionReport> {
    let clean_sq = g_clean.l2_norm_sq();
    let noise_sq = g_noise.l2_norm_sq();
    let inner = g_clean.dot(g_noise)?;
    let biased_sq = (clean_sq + 2.0 * inner + noise_sq).max(0.0);
    let (clean_norm, noise_norm, biased_norm) = (clean_sq.sqrt(), noise_sq.sqrt(), biased_sq.sqrt());
    if clean_norm == 0.0 {
        return Err(Error::Degenerate("clean gradient is zero".into()));
    }
    if biased_norm == 0.0 {
        return Err(Error::Degenerate("biased gradient is zero".into()));
    }
    let cos_theta = ((clean_sq + inner) / (clean_sq * biased_sq).sqrt()).clamp(-1.0, 1.0);
    let regime = if (biased_norm - clean_norm).abs() <= 1e-12 {
        Regime::Neutral
    } else if biased_norm > clean_norm {
        Regime::OverPerturbation
    } else {
        Regime::UnderPerturbation
    };
    Ok(DistortionReport {
        cos_theta,
        clean_norm,
        noise_norm,
        biased_norm,
        inner_product: inner,
        regime,
    })
}

/// Batch gradient split into the parts contributed by clean and by corrupted
/// samples. The two parts add up to the full mean-batch gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSplit {
    pub clean: GradientSet,
    pub noise: GradientSet,
    pub clean_count: usize,
    pub noisy_count: usize,
}

impl GradientSplit {
    pub fn clean_empty(&self) -> bool {
        self.clean_count == 0
    }

    pub fn noise_empty(&self) -> bool {
        self.noisy_count == 0
    }
}

/// `mask[i]` marks batch position `i` as corrupted.
pub fn empirical_gradient_split<M: Model + ?Sized>(
    model: &M,
    params: &ParameterSet,
    batch: &Batch,
    mask: &[bool],
) -> Result<GradientSplit> {
    if mask.len() != batch.len() {
        return Err(Error::Dimension(format!(
            "mask has {} entries for a batch of {}",
            mask.len(),
            batch.len()
        )));
    }
    let (noisy, clean): (Vec<usize>, Vec<usize>) = (0..batch.len()).partition(|&i| mask[i]);
    let b = batch.len() as f64;
    let part = |positions: &[usize]| -> Result<GradientSet> {
        if positions.is_empty() {
            return Ok(params.zeros_like());
        }
        let (_, g) = model.loss_and_grad(params, &batch.subset(positions)?)?;
        Ok(g.scale(positions.len() as f64 / b))
    };
    Ok(GradientSplit {
        clean: part(&clean)?,
        noise: part(&noisy)?,
        clean_count: clean.len(),
        noisy_count: noisy.len(),
    })
}

/// Largest loss increase over the first-order SAM direction and
/// `trials − 1` random directions, all of norm `radius`.
pub fn sharpness_estimate<M: Model + ?Sized>(
    model: &M,
    params: &ParameterSet,
    batch: &Batch,
    radius: f64,
    trials: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidArgument("sharpness needs at least one trial".into()));
    }
    if radius == 0.0 {
        return Ok(0.0);
    }
    let (base, grad) = model.loss_and_grad(params, batch)?;
    let first_order = sam_perturbation(&grad, radius);
    let (l, _) = model.loss_and_grad(&params.axpy(1.0, &first_order)?, batch)?;
    let mut best = l - base;
    for _ in 1..trials {
        let flat: Vec<f64> = (0..params.param_count()).map(|_| StandardNormal.sample(rng)).collect();
        let dir = GradientSet::from_flat_like(params, &flat)?;
        let norm = dir.l2_norm();
        if norm == 0.0 {
            continue;
        }
        let (l, _) = model.loss_and_grad(&params.axpy(radius / norm, &dir)?, batch)?;
        best = best.max(l - base);
    }
    Ok(best)
}

/// `‖W_a − W_b‖`: distance between two trajectories that differ only in label
/// corruption, used as a stand-in for the unobservable deviation from the
/// clean optimum.
pub fn deviation_proxy(noisy: &ParameterSet, clean: &ParameterSet) -> Result<f64> {
    Ok(noisy.sub(clean)?.l2_norm())
}
