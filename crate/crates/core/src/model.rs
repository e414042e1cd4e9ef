//! A small ReLU feedforward classifier with exact analytic gradients of the
//! mean softmax cross-entropy.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradientSet, ParameterSet, Tensor, TensorSet};

/// Anything that can score a batch and differentiate its loss.
///
/// The MLP is the only production implementation; tests plug in closed-form
/// objectives to check optimizer arithmetic.
pub trait Model {
    /// Logits, shape `B × C`.
    fn forward(&self, params: &ParameterSet, features: &Tensor) -> Result<Tensor>;

    /// Mean loss over the batch and its exact gradient.
    fn loss_and_grad(&self, params: &ParameterSet, batch: &Batch) -> Result<(f64, GradientSet)>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input dimension, hidden widths, then class count.
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub init_seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, init_seed: u64) -> Result<Self> {
        let spec = Self {
            layer_widths,
            activation: Activation::Relu,
            init_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "an MLP needs at least an input and an output width".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if self.classes() < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_widths.last().unwrap_or(&0)
    }

    pub fn layer_count(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// A mini-batch: features, the labels to train against, and the dataset
/// rows they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub sample_indices: Vec<usize>,
    /// Target distributions (`B × C`) replacing `labels` in the loss when set.
    pub soft_targets: Option<Tensor>,
}

impl Batch {
    pub fn new(features: Tensor, labels: Vec<usize>, sample_indices: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if sample_indices.len() != labels.len() {
            return Err(Error::Dimension("sample_indices length differs from labels".into()));
        }
        Ok(Self {
            features,
            labels,
            sample_indices,
            soft_targets: None,
        })
    }

    pub fn with_soft_targets(mut self, targets: Tensor) -> Result<Self> {
        if targets.shape().len() != 2 || targets.rows() != self.len() {
            return Err(Error::Dimension(format!(
                "soft targets {:?} do not match {} samples",
                targets.shape(),
                self.len()
            )));
        }
        self.soft_targets = Some(targets);
        Ok(self)
    }

    /// Gathers dataset rows into a batch.
    pub fn gather(features: &Tensor, labels: &[usize], rows: &[usize]) -> Result<Self> {
        let x = features.select_rows(rows)?;
        let y = rows.iter().map(|&r| labels[r]).collect();
        Self::new(x, y, rows.to_vec())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sub-batch made of the given positions (not dataset rows).
    pub fn subset(&self, positions: &[usize]) -> Result<Self> {
        let x = self.features.select_rows(positions)?;
        let y = positions.iter().map(|&p| self.labels[p]).collect();
        let idx = positions.iter().map(|&p| self.sample_indices[p]).collect();
        let sub = Self::new(x, y, idx)?;
        match &self.soft_targets {
            Some(t) => sub.with_soft_targets(t.select_rows(positions)?),
            None => Ok(sub),
        }
    }

    /// Same samples, different hard labels (any soft targets are dropped).
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.features.clone(), labels, self.sample_indices.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    spec: MlpSpec,
}

fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Glorot-uniform weights, zero biases, fully determined by `init_seed`.
pub fn init_params(spec: &MlpSpec) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut entries = Vec::with_capacity(2 * spec.layer_count());
    for (l, w) in spec.layer_widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
        entries.push((weight_name(l), Tensor::new(vec![fan_in, fan_out], data)?));
        entries.push((bias_name(l), Tensor::zeros(vec![fan_out])));
    }
    TensorSet::new(entries)
}

// out[B×n] = a[B×m] · w[m×n] + bias[n]
fn affine(a: &[f64], rows: usize, w: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let mut out = Vec::with_capacity(rows * n);
    for r in 0..rows {
        out.extend_from_slice(bias.data());
        let o = &mut out[r * n..(r + 1) * n];
        for (k, &ak) in a[r * m..(r + 1) * m].iter().enumerate() {
            if ak == 0.0 {
                continue;
            }
            for (oj, wj) in o.iter_mut().zip(&wd[k * n..(k + 1) * n]) {
                *oj += ak * wj;
            }
        }
    }
    out
}

/// Row-wise log-softmax via log-sum-exp.
fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

/// Softmax probabilities of a logit vector.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Targets for the cross-entropy: hard class indices or full distributions.
enum Targets<'a> {
    Hard(&'a [usize]),
    Soft(&'a Tensor),
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    pub fn init_params(&self) -> Result<ParameterSet> {
        init_params(&self.spec)
    }

    fn check_params(&self, params: &ParameterSet) -> Result<()> {
        if params.len() != 2 * self.spec.layer_count() {
            return Err(Error::Dimension(format!(
                "expected {} tensors, got {}",
                2 * self.spec.layer_count(),
                params.len()
            )));
        }
        for (l, w) in self.spec.layer_widths.windows(2).enumerate() {
            if params.tensor(2 * l).shape() != [w[0], w[1]] || params.tensor(2 * l + 1).shape() != [w[1]] {
                return Err(Error::Dimension(format!("layer {l} has wrong shapes")));
            }
        }
        Ok(())
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        if features.shape().len() != 2 || features.cols() != self.spec.input_dim() {
            return Err(Error::Dimension(format!(
                "features {:?} do not match input width {}",
                features.shape(),
                self.spec.input_dim()
            )));
        }
        Ok(())
    }

    /// Pre-activations of every layer, last one being the logits.
    fn forward_cached(&self, params: &ParameterSet, features: &Tensor) -> Vec<Vec<f64>> {
        let rows = features.rows();
        let layers = self.spec.layer_count();
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(layers);
        let mut act = features.data().to_vec();
        for l in 0..layers {
            let z = affine(&act, rows, params.tensor(2 * l), params.tensor(2 * l + 1));
            if l + 1 < layers {
                act = z.iter().map(|&v| v.max(0.0)).collect();
            }
            pre.push(z);
        }
        pre
    }

    fn loss_and_grad_impl(
        &self,
        params: &ParameterSet,
        features: &Tensor,
        targets: Targets<'_>,
    ) -> Result<(f64, GradientSet)> {
        self.check_params(params)?;
        self.check_features(features)?;
        let rows = features.rows();
        let c = self.classes();
        match &targets {
            Targets::Hard(labels) => {
                if labels.len() != rows {
                    return Err(Error::Dimension("label count differs from rows".into()));
                }
                if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
                    return Err(Error::InvalidArgument(format!(
                        "label {bad} out of range for {c} classes"
                    )));
                }
            }
            Targets::Soft(t) => {
                if t.shape() != [rows, c] {
                    return Err(Error::Dimension(format!(
                        "soft targets {:?} should be [{rows}, {c}]",
                        t.shape()
                    )));
                }
            }
        }

        let pre = self.forward_cached(params, features);
        let logits = pre.last().expect("at least one layer");
        let inv_b = 1.0 / rows as f64;

        // dL/dz for the output layer: (softmax - target) / B
        let mut delta = vec![0.0; rows * c];
        let mut loss = 0.0;
        let mut logp = vec![0.0; c];
        for r in 0..rows {
            log_softmax_row(&logits[r * c..(r + 1) * c], &mut logp);
            let d = &mut delta[r * c..(r + 1) * c];
            for (dj, lp) in d.iter_mut().zip(&logp) {
                *dj = lp.exp() * inv_b;
            }
            match &targets {
                Targets::Hard(labels) => {
                    let y = labels[r];
                    loss -= logp[y];
                    d[y] -= inv_b;
                }
                Targets::Soft(t) => {
                    for ((dj, lp), tj) in d.iter_mut().zip(&logp).zip(t.row(r)) {
                        loss -= tj * lp;
                        *dj -= tj * inv_b;
                    }
                }
            }
        }
        loss *= inv_b;

        let layers = self.spec.layer_count();
        let mut grads: Vec<(String, Tensor)> = Vec::with_capacity(2 * layers);
        for l in (0..layers).rev() {
            let (m, n) = (self.spec.layer_widths[l], self.spec.layer_widths[l + 1]);
            let input: Vec<f64> = if l == 0 {
                features.data().to_vec()
            } else {
                pre[l - 1].iter().map(|&v| v.max(0.0)).collect()
            };
            let mut gw = vec![0.0; m * n];
            let mut gb = vec![0.0; n];
            for r in 0..rows {
                let dr = &delta[r * n..(r + 1) * n];
                for (gbj, dj) in gb.iter_mut().zip(dr) {
                    *gbj += dj;
                }
                for (k, &ak) in input[r * m..(r + 1) * m].iter().enumerate() {
                    if ak == 0.0 {
                        continue;
                    }
                    for (g, dj) in gw[k * n..(k + 1) * n].iter_mut().zip(dr) {
                        *g += ak * dj;
                    }
                }
            }
            if l > 0 {
                let w = params.tensor(2 * l).data();
                let z_prev = &pre[l - 1];
                let mut next = vec![0.0; rows * m];
                for r in 0..rows {
                    let dr = &delta[r * n..(r + 1) * n];
                    for k in 0..m {
                        // ReLU subgradient at 0 is 0
                        if z_prev[r * m + k] <= 0.0 {
                            continue;
                        }
                        next[r * m + k] = w[k * n..(k + 1) * n].iter().zip(dr).map(|(a, b)| a * b).sum();
                    }
                }
                delta = next;
            }
            grads.push((bias_name(l), Tensor::new(vec![n], gb)?));
            grads.push((weight_name(l), Tensor::new(vec![m, n], gw)?));
        }
        grads.reverse();
        Ok((loss, TensorSet::new(grads)?))
    }

    /// Cross-entropy against target distributions (rows of `targets`).
    pub fn loss_and_grad_soft(
        &self,
        params: &ParameterSet,
        features: &Tensor,
        targets: &Tensor,
    ) -> Result<(f64, GradientSet)> {
        self.loss_and_grad_impl(params, features, Targets::Soft(targets))
    }

    /// Predicted class per row (ties to the lowest index).
    pub fn predict(&self, params: &ParameterSet, features: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(params, features)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }
}

impl Model for Mlp {
    fn forward(&self, params: &ParameterSet, features: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        self.check_features(features)?;
        let mut pre = self.forward_cached(params, features);
        let logits = pre.pop().expect("at least one layer");
        Tensor::new(vec![features.rows(), self.classes()], logits)
    }

    fn loss_and_grad(&self, params: &ParameterSet, batch: &Batch) -> Result<(f64, GradientSet)> {
        let targets = match &batch.soft_targets {
            Some(t) => Targets::Soft(t),
            None => Targets::Hard(&batch.labels),
        };
        self.loss_and_grad_impl(params, &batch.features, targets)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
