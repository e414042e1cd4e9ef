//! Label corruption with known ground truth.
//!
//! Hard-label variants return the observed labels together with a mask that
//! is true exactly where the observed label differs from the true one. The
//! beta-mixture variant returns soft target rows instead.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use log::warn;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flip::flip_top2;
use crate::model::{softmax, Mlp, Model};
use crate::rng;
use crate::tensor::{ParameterSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    AsymmetricPair,
    InstanceDependent,
    BetaMixture,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Corruption rate α in [0, 1].
    pub rate: f64,
    /// Beta(β, γ) shape parameters, used only by `beta_mixture`.
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    /// Class permutation for `asymmetric_pair`; defaults to the cyclic shift
    /// `c -> (c + 1) mod C`.
    #[serde(default)]
    pub pair_map: Option<Vec<usize>>,
    /// Symmetric noise may redraw the original class (so the realized rate is
    /// `α (C-1)/C`).
    #[serde(default)]
    pub include_self_flip: bool,
    /// Fixed corruption seed. When absent the harness derives one from the
    /// run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl NoiseSpec {
    pub fn symmetric(rate: f64) -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            rate,
            beta: 1.0,
            gamma: 1.0,
            pair_map: None,
            include_self_flip: false,
            seed: None,
        }
    }

    pub fn none() -> Self {
        Self::symmetric(0.0)
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        check_rate(self.rate)?;
        if self.kind == NoiseKind::BetaMixture && !(self.beta > 0.0 && self.gamma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "beta parameters must be positive, got ({}, {})",
                self.beta, self.gamma
            )));
        }
        if let Some(map) = &self.pair_map {
            check_pair_map(map)?;
            if map.len() != classes {
                return Err(Error::InvalidArgument(format!(
                    "pair_map has {} entries for {classes} classes",
                    map.len()
                )));
            }
        }
        Ok(())
    }

    pub fn resolved_pair_map(&self, classes: usize) -> Vec<usize> {
        self.pair_map.clone().unwrap_or_else(|| cyclic_pair_map(classes))
    }
}

/// Observed labels plus the corruption mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corruption {
    pub observed: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Corruption {
    pub fn rate(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCorruption {
    pub corruption: Corruption,
    /// Expected flip fraction after clamping per-sample probabilities at 1.
    pub effective_rate: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftCorruption {
    pub soft_labels: Tensor,
    /// Rows that were mixed with a random distribution.
    pub mask: Vec<bool>,
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "noise rate must lie in [0, 1], got {rate}"
        )));
    }
    Ok(())
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// `c -> (c + 1) mod C`.
pub fn cyclic_pair_map(classes: usize) -> Vec<usize> {
    (0..classes).map(|c| (c + 1) % classes).collect()
}

fn check_pair_map(map: &[usize]) -> Result<()> {
    if map.len() < 2 {
        return Err(Error::InvalidArgument("pair_map needs at least 2 classes".into()));
    }
    for (c, &t) in map.iter().enumerate() {
        if t >= map.len() {
            return Err(Error::InvalidArgument(format!(
                "pair_map sends {c} to out-of-range class {t}"
            )));
        }
        if t == c {
            return Err(Error::InvalidArgument(format!(
                "pair_map has a fixed point at class {c}"
            )));
        }
    }
    Ok(())
}

/// Each label is selected with probability `rate` and replaced by a uniform
/// draw over the other `C-1` classes.
pub fn corrupt_symmetric(labels: &[usize], classes: usize, rate: f64, seed: u64) -> Result<Corruption> {
    corrupt_symmetric_with(labels, classes, rate, false, seed)
}

pub fn corrupt_symmetric_with(
    labels: &[usize],
    classes: usize,
    rate: f64,
    include_self_flip: bool,
    seed: u64,
) -> Result<Corruption> {
    check_labels(labels, classes)?;
    check_rate(rate)?;
    let mut rng = rng::seeded(seed);
    let mut observed = Vec::with_capacity(labels.len());
    for &y in labels {
        let target = if rng.random::<f64>() < rate {
            if include_self_flip {
                rng.random_range(0..classes)
            } else {
                let r = rng.random_range(0..classes - 1);
                if r >= y {
                    r + 1
                } else {
                    r
                }
            }
        } else {
            y
        };
        observed.push(target);
    }
    let mask = observed.iter().zip(labels).map(|(o, y)| o != y).collect();
    Ok(Corruption { observed, mask })
}

/// With probability `rate`, `y -> pair_map[y]`.
pub fn corrupt_asymmetric(labels: &[usize], pair_map: &[usize], rate: f64, seed: u64) -> Result<Corruption> {
    check_pair_map(pair_map)?;
    check_labels(labels, pair_map.len())?;
    check_rate(rate)?;
    let mut rng = rng::seeded(seed);
    let observed: Vec<usize> = labels
        .iter()
        .map(|&y| if rng.random::<f64>() < rate { pair_map[y] } else { y })
        .collect();
    let mask = observed.iter().zip(labels).map(|(o, y)| o != y).collect();
    Ok(Corruption { observed, mask })
}

/// Scales nonnegative weights so they average to `rate`, clamping any
/// probability that would exceed 1 and redistributing the excess.
fn water_fill(weights: &[f64], rate: f64) -> Vec<f64> {
    let mut probs = vec![0.0; weights.len()];
    let mut active: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    let mut remaining = rate * weights.len() as f64;
    while !active.is_empty() && remaining > 0.0 {
        let total: f64 = active.iter().map(|&i| weights[i]).sum();
        let scale = remaining / total;
        let (clamped, free): (Vec<usize>, Vec<usize>) = active.iter().partition(|&&i| scale * weights[i] >= 1.0);
        if clamped.is_empty() {
            for &i in &free {
                probs[i] = scale * weights[i];
            }
            break;
        }
        for &i in &clamped {
            probs[i] = 1.0;
        }
        remaining -= clamped.len() as f64;
        active = free;
    }
    probs
}

/// Flips each sample with probability proportional to the probe model's
/// uncertainty `1 - max softmax`, scaled so the expected flip fraction is
/// `rate`. The flip target is the probe's highest-scoring class other than
/// the true label.
pub fn corrupt_instance_dependent(
    features: &Tensor,
    labels: &[usize],
    probe: &Mlp,
    probe_params: &ParameterSet,
    rate: f64,
    seed: u64,
) -> Result<InstanceCorruption> {
    check_labels(labels, probe.classes())?;
    check_rate(rate)?;
    if features.rows() != labels.len() {
        return Err(Error::Dimension("features and labels differ in length".into()));
    }
    let logits = probe.forward(probe_params, features)?;
    let uncertainty: Vec<f64> = (0..logits.rows())
        .map(|r| {
            let p = softmax(logits.row(r));
            (1.0 - p.iter().copied().fold(0.0, f64::max)).max(0.0)
        })
        .collect();
    let probs = water_fill(&uncertainty, rate);
    let effective_rate = if labels.is_empty() {
        0.0
    } else {
        probs.iter().sum::<f64>() / labels.len() as f64
    };
    let warning = if rate > 0.0 && effective_rate + 1e-12 < rate {
        let msg = format!(
            "instance-dependent noise: requested rate {rate} infeasible under probe uncertainty; effective rate {effective_rate}"
        );
        warn!("{msg}");
        Some(msg)
    } else {
        None
    };

    let mut rng = rng::seeded(seed);
    let mut observed = Vec::with_capacity(labels.len());
    for (r, (&y, &p)) in labels.iter().zip(&probs).enumerate() {
        let u: f64 = rng.random();
        observed.push(if u < p { flip_top2(logits.row(r), y) } else { y });
    }
    let mask = observed.iter().zip(labels).map(|(o, y)| o != y).collect();
    Ok(InstanceCorruption {
        corruption: Corruption { observed, mask },
        effective_rate,
        warning,
    })
}

/// With probability `rate` per row, replaces a one-hot row `y` by
/// `(1-α) y + α u`, where `u` is `C` independent Beta(β, γ) draws normalized
/// to sum to one.
pub fn corrupt_beta_mixture(onehot: &Tensor, rate: f64, beta: f64, gamma: f64, seed: u64) -> Result<SoftCorruption> {
    check_rate(rate)?;
    if !(beta > 0.0 && gamma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "beta parameters must be positive, got ({beta}, {gamma})"
        )));
    }
    let c = onehot.cols();
    for r in 0..onehot.rows() {
        let row = onehot.row(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != c {
            return Err(Error::InvalidArgument(format!("row {r} is not one-hot")));
        }
    }
    let dist = Beta::new(beta, gamma).map_err(|e| Error::InvalidArgument(format!("beta distribution: {e}")))?;
    let mut rng = rng::seeded(seed);
    let mut soft = onehot.clone();
    let mut mask = vec![false; onehot.rows()];
    let mut u = vec![0.0; c];
    for (r, m) in mask.iter_mut().enumerate() {
        if rng.random::<f64>() >= rate {
            continue;
        }
        *m = true;
        let mut total = 0.0;
        for v in &mut u {
            *v = dist.sample(&mut rng);
            total += *v;
        }
        if total <= 0.0 || !total.is_finite() {
            u.iter_mut().for_each(|v| *v = 1.0 / c as f64);
            total = 1.0;
        }
        let row = &mut soft.data_mut()[r * c..(r + 1) * c];
        for (x, v) in row.iter_mut().zip(&u) {
            *x = (1.0 - rate) * *x + rate * v / total;
        }
    }
    Ok(SoftCorruption {
        soft_labels: soft,
        mask,
    })
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    check_labels(labels, classes)?;
    let mut t = Tensor::zeros(vec![labels.len().max(1), classes]);
    for (r, &y) in labels.iter().enumerate() {
        t.data_mut()[r * classes + y] = 1.0;
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObservedLabels {
    Hard(Vec<usize>),
    Soft(Tensor),
}

/// A dataset whose corruption is known: features, true and observed labels,
/// and the corruption mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    pub features: Tensor,
    pub true_labels: Vec<usize>,
    pub observed: ObservedLabels,
    pub corrupted: Vec<bool>,
    pub classes: usize,
    pub seed: u64,
    pub spec: NoiseSpec,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetSidecar {
    format_version: u32,
    rows: usize,
    cols: usize,
    classes: usize,
    seed: u64,
    label_kind: String,
    noise: NoiseSpec,
}

const FEATURES_FILE: &str = "features.bin";
const SIDECAR_FILE: &str = "dataset.json";
const LABELS_FILE: &str = "labels.csv";
const SOFT_LABELS_FILE: &str = "soft_labels.csv";

impl NoisyDataset {
    /// Corrupts `true_labels` according to `spec`. Instance-dependent noise
    /// needs a probe model fitted on the clean labels.
    pub fn build(
        features: Tensor,
        true_labels: Vec<usize>,
        classes: usize,
        spec: &NoiseSpec,
        seed: u64,
        probe: Option<(&Mlp, &ParameterSet)>,
    ) -> Result<Self> {
        spec.validate(classes)?;
        let (observed, corrupted) = match spec.kind {
            NoiseKind::Symmetric => {
                let c = corrupt_symmetric_with(&true_labels, classes, spec.rate, spec.include_self_flip, seed)?;
                (ObservedLabels::Hard(c.observed), c.mask)
            }
            NoiseKind::AsymmetricPair => {
                let c = corrupt_asymmetric(&true_labels, &spec.resolved_pair_map(classes), spec.rate, seed)?;
                (ObservedLabels::Hard(c.observed), c.mask)
            }
            NoiseKind::InstanceDependent => {
                let (model, params) = probe
                    .ok_or_else(|| Error::InvalidArgument("instance-dependent noise needs a probe model".into()))?;
                let c = corrupt_instance_dependent(&features, &true_labels, model, params, spec.rate, seed)?;
                (ObservedLabels::Hard(c.corruption.observed), c.corruption.mask)
            }
            NoiseKind::BetaMixture => {
                let onehot = one_hot(&true_labels, classes)?;
                let c = corrupt_beta_mixture(&onehot, spec.rate, spec.beta, spec.gamma, seed)?;
                (ObservedLabels::Soft(c.soft_labels), c.mask)
            }
        };
        Ok(Self {
            features,
            true_labels,
            observed,
            corrupted,
            classes,
            seed,
            spec: spec.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    /// Hard observed labels; for soft labels, the argmax of each row.
    pub fn hard_labels(&self) -> Vec<usize> {
        match &self.observed {
            ObservedLabels::Hard(l) => l.clone(),
            ObservedLabels::Soft(t) => (0..t.rows()).map(|r| crate::model::argmax(t.row(r))).collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::with_capacity(self.features.len() * 8);
        for v in self.features.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(FEATURES_FILE);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;

        let sidecar = DatasetSidecar {
            format_version: 1,
            rows: self.features.rows(),
            cols: self.features.cols(),
            classes: self.classes,
            seed: self.seed,
            label_kind: match self.observed {
                ObservedLabels::Hard(_) => "hard".into(),
                ObservedLabels::Soft(_) => "soft".into(),
            },
            noise: self.spec.clone(),
        };
        let path = dir.join(SIDECAR_FILE);
        let mut json = serde_json::to_string_pretty(&sidecar)?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

        let mut csv = String::new();
        match &self.observed {
            ObservedLabels::Hard(obs) => {
                csv.push_str("index,true_label,observed_label,corrupted\n");
                for (i, ((y, o), m)) in self.true_labels.iter().zip(obs).zip(&self.corrupted).enumerate() {
                    csv.push_str(&format!("{i},{y},{o},{}\n", u8::from(*m)));
                }
            }
            ObservedLabels::Soft(soft) => {
                csv.push_str("index,true_label,corrupted\n");
                for (i, (y, m)) in self.true_labels.iter().zip(&self.corrupted).enumerate() {
                    csv.push_str(&format!("{i},{y},{}\n", u8::from(*m)));
                }
                let mut s = String::from("index");
                for c in 0..self.classes {
                    s.push_str(&format!(",p{c}"));
                }
                s.push('\n');
                for r in 0..soft.rows() {
                    s.push_str(&r.to_string());
                    for v in soft.row(r) {
                        s.push_str(&format!(",{v:?}"));
                    }
                    s.push('\n');
                }
                let path = dir.join(SOFT_LABELS_FILE);
                fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
            }
        }
        let path = dir.join(LABELS_FILE);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(csv.as_bytes()).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SIDECAR_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: DatasetSidecar = serde_json::from_str(&text)?;

        let path = dir.join(FEATURES_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != sidecar.rows * sidecar.cols * 8 {
            return Err(Error::Csv {
                path,
                reason: format!(
                    "expected {} bytes for {}x{} features, found {}",
                    sidecar.rows * sidecar.cols * 8,
                    sidecar.rows,
                    sidecar.cols,
                    bytes.len()
                ),
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let features = Tensor::new(vec![sidecar.rows, sidecar.cols], data)?;

        let soft = sidecar.label_kind == "soft";
        let path = dir.join(LABELS_FILE);
        let rows = read_csv(&path, if soft { 3 } else { 4 })?;
        let bad = |reason: String| Error::Csv {
            path: path.clone(),
            reason,
        };
        let mut true_labels = Vec::with_capacity(rows.len());
        let mut hard = Vec::new();
        let mut corrupted = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let parse = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("line {}: {e}", i + 2)));
            true_labels.push(parse(&row[1])?);
            if !soft {
                hard.push(parse(&row[2])?);
            }
            corrupted.push(parse(row.last().expect("non-empty row"))? == 1);
        }
        if true_labels.len() != sidecar.rows {
            return Err(bad(format!(
                "{} label rows for {} samples",
                true_labels.len(),
                sidecar.rows
            )));
        }
        let observed = if soft {
            let path = dir.join(SOFT_LABELS_FILE);
            let rows = read_csv(&path, sidecar.classes + 1)?;
            let mut data = Vec::with_capacity(rows.len() * sidecar.classes);
            for row in &rows {
                for v in &row[1..] {
                    data.push(v.parse::<f64>().map_err(|e| Error::Csv {
                        path: path.clone(),
                        reason: e.to_string(),
                    })?);
                }
            }
            ObservedLabels::Soft(Tensor::new(vec![rows.len(), sidecar.classes], data)?)
        } else {
            ObservedLabels::Hard(hard)
        };
        Ok(Self {
            features,
            true_labels,
            observed,
            corrupted,
            classes: sidecar.classes,
            seed: sidecar.seed,
            spec: sidecar.noise,
        })
    }
}

/// Reads a headered CSV file whose rows all have `columns` fields.
fn read_csv(path: &Path, columns: usize) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<String> = line.split(',').map(str::to_owned).collect();
        if fields.len() != columns {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                reason: format!("line {}: expected {columns} fields, found {}", i + 1, fields.len()),
            });
        }
        out.push(fields);
    }
    Ok(out)
}
