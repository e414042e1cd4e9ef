//! Synthetic datasets, stratified splitting and the IDX (MNIST) file format.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, IdxError, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

fn check_sizes(n: usize, classes: usize) -> Result<()> {
    if classes < 2 || n < classes {
        return Err(Error::InvalidArgument(format!(
            "need n >= C >= 2, got n = {n}, C = {classes}"
        )));
    }
    Ok(())
}

/// Balanced labels `i mod C` in a seeded random order.
fn balanced_labels(n: usize, classes: usize, rng: &mut Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

/// Two interleaving half circles in the plane.
pub fn generate_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    check_sizes(n, 2)?;
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidArgument("noise_std must be nonnegative".into()));
    }
    let mut rng = rng::seeded(seed);
    let labels = balanced_labels(n, 2, &mut rng);
    let per_class = [
        labels.iter().filter(|&&y| y == 0).count(),
        labels.iter().filter(|&&y| y == 1).count(),
    ];
    let mut seen = [0usize; 2];
    let noise =
        Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(2 * n);
    for &y in &labels {
        let denom = per_class[y].saturating_sub(1).max(1) as f64;
        let theta = PI * seen[y] as f64 / denom;
        seen[y] += 1;
        let (mut px, mut py) = if y == 0 {
            (theta.cos(), theta.sin())
        } else {
            (1.0 - theta.cos(), 0.5 - theta.sin())
        };
        if noise_std > 0.0 {
            px += noise.sample(&mut rng);
            py += noise.sample(&mut rng);
        }
        data.push(px);
        data.push(py);
    }
    Ok((Tensor::new(vec![n, 2], data)?, labels))
}

/// Isotropic unit-variance Gaussian clusters whose centers sit `separation`
/// apart. With `C <= d` the centers are scaled basis vectors, so every pair is
/// exactly `separation` apart; otherwise they are random directions on a
/// sphere of the same radius.
pub fn generate_gaussian_blobs(
    n: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    check_sizes(n, classes)?;
    if dim == 0 || !(separation >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid blob geometry: dim = {dim}, separation = {separation}"
        )));
    }
    let mut rng = rng::seeded(seed);
    let radius = separation / 2f64.sqrt();
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            if classes <= dim {
                let mut v = vec![0.0; dim];
                v[c] = radius;
                v
            } else {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x * radius / norm).collect()
            }
        })
        .collect();
    let labels = balanced_labels(n, classes, &mut rng);
    let mut data = Vec::with_capacity(n * dim);
    for &y in &labels {
        for &c in &centers[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(c + z);
        }
    }
    Ok((Tensor::new(vec![n, dim], data)?, labels))
}

/// Row indices of a stratified train/test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits every class separately, `train_fraction` of it (rounded) going to
/// the training side. Index lists come back sorted.
pub fn stratified_split(labels: &[usize], classes: usize, train_fraction: f64, rng: &mut Rng) -> Split {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rows.shuffle(rng);
        let cut = (train_fraction * rows.len() as f64).round() as usize;
        train.extend_from_slice(&rows[..cut]);
        test.extend_from_slice(&rows[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Split { train, test }
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(IdxError::Truncated {
            offset,
            needed: 4,
            available: bytes.len().saturating_sub(offset),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic {
            offset: 0,
            expected,
            found,
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], offset: usize, needed: usize) -> Result<&[u8], IdxError> {
    bytes.get(offset..offset + needed).ok_or(IdxError::Truncated {
        offset,
        needed,
        available: bytes.len().saturating_sub(offset),
    })
}

/// Decoded IDX image file: `count` images of `rows × cols` unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let pixels = payload(bytes, 16, count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let labels = payload(bytes, 8, count)?;
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(IdxError::LabelOutOfRange {
            offset: 8 + pos,
            label: labels[pos],
        });
    }
    Ok(labels.to_vec())
}

/// Decodes an image/label file pair: features `[N × rows·cols]` scaled to
/// `[0, 1]` and labels in `0..=9`.
pub fn decode_idx(images: &[u8], labels: &[u8]) -> Result<(Tensor, Vec<usize>), IdxError> {
    let img = parse_idx_images(images)?;
    let lab = parse_idx_labels(labels)?;
    if img.count != lab.len() {
        return Err(IdxError::CountMismatch {
            offset: 4,
            images: img.count,
            labels: lab.len(),
        });
    }
    let width = img.rows * img.cols;
    let data = img.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let features = Tensor::new(vec![img.count, width], data).map_err(|_| IdxError::Truncated {
        offset: 16,
        needed: 1,
        available: 0,
    })?;
    Ok((features, lab.into_iter().map(usize::from).collect()))
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    Ok(decode_idx(&images, &labels)?)
}
