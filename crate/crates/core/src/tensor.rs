//! Dense row-major `f64` tensors and ordered named tensor collections.
//!
//! [`TensorSet`] is the carrier for model weights and for gradients. Every
//! reduction (`dot`, `l2_norm`) walks the entries in their stored order, so
//! results are reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor (1 for vectors).
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Gathers the given rows into a new 2-D tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= self.rows() {
                return Err(Error::Dimension(format!(
                    "row {r} out of range for {} rows",
                    self.rows()
                )));
            }
            data.extend_from_slice(self.row(r));
        }
        Self::new(vec![rows.len(), c], data)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// An ordered list of named tensors: one weight matrix and one bias vector
/// per layer, in layer order with the weight first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSet {
    entries: Vec<(String, Tensor)>,
}

/// Model weights `W`.
pub type ParameterSet = TensorSet;
/// Gradients, perturbations and corrections living in parameter space.
pub type GradientSet = TensorSet;

impl TensorSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::InvalidArgument(format!("duplicate entry name {name:?}")));
            }
        }
        Ok(Self { entries })
    }

    /// A set with the same names and shapes, filled with zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape.clone())))
                .collect(),
        }
    }

    /// Builds a congruent set from a flat vector laid out in entry order.
    pub fn from_flat_like(template: &TensorSet, flat: &[f64]) -> Result<Self> {
        if flat.len() != template.param_count() {
            return Err(Error::Dimension(format!(
                "flat vector has {} values, template needs {}",
                flat.len(),
                template.param_count()
            )));
        }
        let mut offset = 0;
        let entries = template
            .entries
            .iter()
            .map(|(n, t)| {
                let len = t.len();
                let data = flat[offset..offset + len].to_vec();
                offset += len;
                (
                    n.clone(),
                    Tensor {
                        shape: t.shape.clone(),
                        data,
                    },
                )
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters `k`.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values().collect()
    }

    /// Iterates every scalar in entry order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().flat_map(|(_, t)| t.data.iter().copied())
    }

    pub fn is_congruent(&self, other: &TensorSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape == t2.shape)
    }

    fn check_congruent(&self, other: &TensorSet) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::Dimension("tensor sets differ in names or shapes".into()))
        }
    }

    /// `self + a * v`, leaving both inputs untouched.
    pub fn axpy(&self, a: f64, v: &TensorSet) -> Result<TensorSet> {
        let mut out = self.clone();
        out.axpy_in_place(a, v)?;
        Ok(out)
    }

    pub fn axpy_in_place(&mut self, a: f64, v: &TensorSet) -> Result<()> {
        self.check_congruent(v)?;
        for ((_, t), (_, u)) in self.entries.iter_mut().zip(&v.entries) {
            for (x, y) in t.data.iter_mut().zip(&u.data) {
                *x += a * y;
            }
        }
        Ok(())
    }

    pub fn scale(&self, a: f64) -> TensorSet {
        let mut out = self.clone();
        out.scale_in_place(a);
        out
    }

    pub fn scale_in_place(&mut self, a: f64) {
        for (_, t) in &mut self.entries {
            for x in &mut t.data {
                *x *= a;
            }
        }
    }

    pub fn add(&self, other: &TensorSet) -> Result<TensorSet> {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &TensorSet) -> Result<TensorSet> {
        self.axpy(-1.0, other)
    }

    pub fn dot(&self, other: &TensorSet) -> Result<f64> {
        self.check_congruent(other)?;
        Ok(self.values().zip(other.values()).map(|(a, b)| a * b).sum())
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.values().map(|x| x * x).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// `W + a·v` with value semantics.
pub fn param_axpy(params: &ParameterSet, a: f64, v: &GradientSet) -> Result<ParameterSet> {
    params.axpy(a, v)
}

pub fn grad_l2_norm(g: &GradientSet) -> f64 {
    g.l2_norm()
}

pub fn grad_dot(g1: &GradientSet, g2: &GradientSet) -> Result<f64> {
    g1.dot(g2)
}
