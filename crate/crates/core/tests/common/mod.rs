#![allow(dead_code)]

use flatgrad::model::{Batch, Model};
use flatgrad::rng::Rng;
use flatgrad::{Error, GradientSet, ParameterSet, Result, Tensor, TensorSet};
use rand::Rng as _;

/// `L(w) = ½‖w‖²`, independent of the batch.
pub struct Quadratic;

impl Model for Quadratic {
    fn forward(&self, params: &ParameterSet, features: &Tensor) -> Result<Tensor> {
        let loss = 0.5 * params.l2_norm_sq();
        Tensor::new(vec![features.rows(), 1], vec![loss; features.rows()])
    }

    fn loss_and_grad(&self, params: &ParameterSet, _batch: &Batch) -> Result<(f64, GradientSet)> {
        if !params.is_finite() {
            return Err(Error::Degenerate("non-finite".into()));
        }
        Ok((0.5 * params.l2_norm_sq(), params.clone()))
    }
}

pub fn flat(values: &[f64]) -> TensorSet {
    TensorSet::new(vec![(
        "w".into(),
        Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
    )])
    .unwrap()
}

pub fn dummy_batch(n: usize) -> Batch {
    Batch::new(Tensor::zeros(vec![n, 1]), vec![0; n], (0..n).collect()).unwrap()
}

/// A two-tensor set with entries drawn from U(-scale, scale).
pub fn random_set(rng: &mut Rng, scale: f64) -> TensorSet {
    let a: Vec<f64> = (0..6).map(|_| rng.random_range(-scale..scale)).collect();
    let b: Vec<f64> = (0..3).map(|_| rng.random_range(-scale..scale)).collect();
    TensorSet::new(vec![
        ("a".into(), Tensor::new(vec![2, 3], a).unwrap()),
        ("b".into(), Tensor::new(vec![3], b).unwrap()),
    ])
    .unwrap()
}

fn be32(v: u32) -> [u8; 4] {
    v.to_be_bytes()
}

/// Hand-assembled IDX3 image file.
pub fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, 0x03];
    out.extend(be32(count));
    out.extend(be32(rows));
    out.extend(be32(cols));
    out.extend_from_slice(pixels);
    out
}

/// Hand-assembled IDX1 label file.
pub fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, 0x01];
    out.extend(be32(labels.len() as u32));
    out.extend_from_slice(labels);
    out
}
