//! Dense feed-forward classifier with a hand-written reverse pass.
//!
//! Parameters live in one flat `Vec<f64>`; each layer's weight matrix
//! (`out x in`, row-major) is followed by its bias. Per-layer views are
//! borrowed from that buffer, so flattening is free and aggregation and
//! optimizer updates work directly on the flat vector.

mod backprop;
pub mod checkpoint;
mod hessian;
mod jacobian;
mod model;
mod optim;

use ndarray::{Array2, ArrayView2};

use crate::{Error, Result};

pub use backprop::{
    accuracy, forward, grad, loss_and_grad, loss_ce, per_example_loss, predict,
    regularized_loss_and_grad, RegularizedLoss,
};
pub use hessian::{
    finite_difference_hvp, hvp, hvp_at, BatchObjective, GradientOracle, QuadraticObjective,
};
pub use jacobian::{
    jacobian_input_spectral_norm, jvp, spectral_norm_estimate, vjp, SpectralEstimate,
};
pub use model::{Activation, Architecture, ModelParams};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};

/// Inputs with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Array2<f64>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "batch must contain at least one row".into(),
            ));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Gather the listed rows into a new batch.
    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        let inputs = self.inputs.select(ndarray::Axis(0), rows);
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Batch::new(inputs, labels)
    }

    pub(crate) fn check_against(&self, arch: &Architecture) -> Result<()> {
        if self.dim() != arch.input_dim() {
            return Err(Error::Dimension(format!(
                "batch width {} but model expects {}",
                self.dim(),
                arch.input_dim()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= arch.output_dim()) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {})",
                arch.output_dim()
            )));
        }
        Ok(())
    }
}

/// Flat gradient (or direction) vector indexed like [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradVector(Vec<f64>);

impl GradVector {
    pub fn new(values: Vec<f64>) -> Self {
        GradVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        GradVector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &GradVector) -> f64 {
        crate::linalg::dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    /// `self - other`, used for client updates `theta_k - theta_g`.
    pub fn difference(a: &ModelParams, b: &ModelParams) -> Result<GradVector> {
        if a.architecture() != b.architecture() {
            return Err(Error::Dimension(
                "models have different architectures".into(),
            ));
        }
        Ok(GradVector(
            a.as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(x, y)| x - y)
                .collect(),
        ))
    }
}

impl From<Vec<f64>> for GradVector {
    fn from(v: Vec<f64>) -> Self {
        GradVector(v)
    }
}
