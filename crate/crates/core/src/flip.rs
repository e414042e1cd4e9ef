//! Progressive label-flip simulation.
//!
//! Samples close to the decision boundary (small top-2 logit gap) are drawn
//! with higher probability, their labels are temporarily flipped to the
//! runner-up class, and the cross-entropy gradient of those flipped samples
//! gives the simulated noise gradient `g_n*`.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::rng::Rng;
use crate::tensor::{GradientSet, ParameterSet};

/// The samples chosen for flipping in one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipPlan {
    /// Dataset row ids of the selected samples.
    pub selected: Vec<usize>,
    /// Positions of the selected samples inside the batch.
    pub positions: Vec<usize>,
    /// Simulated noisy label per selected sample.
    pub flipped_labels: Vec<usize>,
    /// Logit gap per selected sample.
    pub gaps: Vec<f64>,
    /// Selection distribution over the whole batch.
    pub probs: Vec<f64>,
}

impl FlipPlan {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Difference between the largest and second-largest logit.
pub fn logit_gap(logits: &[f64]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "logit gap needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &z in logits {
        if z > first {
            second = first;
            first = z;
        } else if z > second {
            second = z;
        }
    }
    Ok(first - second)
}

/// `p_i = w_i / Σ w_j` with `w_i = 1 / (1 + δ_i)`, summing over the whole batch.
pub fn selection_probs(gaps: &[f64]) -> Result<Vec<f64>> {
    if gaps.is_empty() {
        return Err(Error::InvalidArgument("no gaps to weight".into()));
    }
    if let Some(g) = gaps.iter().find(|g| !(**g >= 0.0) || !g.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gap {g} is not a finite nonnegative number"
        )));
    }
    let weights: Vec<f64> = gaps.iter().map(|d| 1.0 / (1.0 + d)).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Weighted sampling without replacement by the Gumbel-top-k trick: perturb
/// each `ln p_i` with standard Gumbel noise and keep the `count` largest.
pub fn sample_candidates(probs: &[f64], count: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if count == 0 || count > probs.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {count} of {} candidates",
            probs.len()
        )));
    }
    let mut keys: Vec<(f64, usize)> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            // open interval keeps both logs finite
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            (p.ln() - (-u.ln()).ln(), i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(keys.into_iter().take(count).map(|(_, i)| i).collect())
}

/// Highest-logit class other than `current_label`; ties go to the lowest index.
pub fn flip_top2(logits: &[f64], current_label: usize) -> usize {
    let mut best: Option<usize> = None;
    for (c, &z) in logits.iter().enumerate() {
        if c == current_label {
            continue;
        }
        match best {
            Some(b) if logits[b] >= z => {}
            _ => best = Some(c),
        }
    }
    best.unwrap_or(0)
}

/// Number of samples to flip in a batch of `batch_size`: `round(γ·B)` clamped
/// to `[1, B]`.
pub fn flip_count(batch_size: usize, flip_ratio: f64) -> usize {
    ((flip_ratio * batch_size as f64).round() as usize).clamp(1, batch_size)
}

/// Scores the batch at the current (unperturbed) parameters and draws the
/// samples to flip. Flips are made against the batch's observed labels.
pub fn build_flip_plan<M: Model + ?Sized>(
    model: &M,
    params: &ParameterSet,
    batch: &Batch,
    flip_ratio: f64,
    rng: &mut Rng,
) -> Result<FlipPlan> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !(flip_ratio > 0.0 && flip_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "flip ratio must lie in (0, 1], got {flip_ratio}"
        )));
    }
    let logits = model.forward(params, &batch.features)?;
    let all_gaps = (0..logits.rows())
        .map(|r| logit_gap(logits.row(r)))
        .collect::<Result<Vec<_>>>()?;
    let probs = selection_probs(&all_gaps)?;
    let positions = sample_candidates(&probs, flip_count(batch.len(), flip_ratio), rng)?;
    let flipped_labels = positions
        .iter()
        .map(|&p| flip_top2(logits.row(p), batch.labels[p]))
        .collect();
    Ok(FlipPlan {
        selected: positions.iter().map(|&p| batch.sample_indices[p]).collect(),
        gaps: positions.iter().map(|&p| all_gaps[p]).collect(),
        positions,
        flipped_labels,
        probs,
    })
}

/// Mean cross-entropy gradient over the selected samples only, each scored
/// against its flipped label.
pub fn simulated_noise_gradient<M: Model + ?Sized>(
    model: &M,
    params: &ParameterSet,
    batch: &Batch,
    plan: &FlipPlan,
) -> Result<GradientSet> {
    if plan.is_empty() {
        return Err(Error::InvalidArgument("flip plan selects no samples".into()));
    }
    if let Some(&p) = plan.positions.iter().find(|&&p| p >= batch.len()) {
        return Err(Error::InvalidArgument(format!(
            "plan position {p} outside batch of {}",
            batch.len()
        )));
    }
    let subset = batch
        .subset(&plan.positions)?
        .with_labels(plan.flipped_labels.clone())?;
    let (_, grad) = model.loss_and_grad(params, &subset)?;
    Ok(grad)
}
