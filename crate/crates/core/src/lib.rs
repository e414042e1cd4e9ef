//! Noise-compensated sharpness-aware minimization on a from-scratch MLP.
//!
//! The crate is split along the training pipeline:
//!
//! - [`tensor`] and [`model`]: dense `f64` tensors and a ReLU classifier with
//!   exact analytic gradients.
//! - [`noise`]: label corruption with known ground truth.
//! - [`flip`]: logit-gap driven label-flip simulation and the simulated
//!   noise gradient.
//! - [`optim`]: SGD, SAM and NCSAM.
//! - [`diagnostics`]: Gaussian PAC-Bayes quantities, perturbation distortion
//!   and sharpness.
//! - [`data`] and [`harness`]: datasets, IDX parsing, the experiment runner,
//!   ablation grids and SVG plots.
// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod flip;
pub mod harness;
pub mod model;
pub mod noise;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, IdxError, Result};
pub use model::{Batch, Mlp, MlpSpec, Model};
pub use tensor::{GradientSet, ParameterSet, Tensor, TensorSet};
