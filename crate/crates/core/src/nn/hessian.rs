use super::backprop::hessian_vector;
use super::{grad, Architecture, Batch, GradVector, ModelParams};
use crate::{Error, Result};

/// Anything that can report a gradient at a flat parameter vector.
///
/// Curvature estimation needs gradients and Hessian-vector products. The
/// default product differentiates the gradient numerically.
pub trait GradientOracle: Sync {
    fn dim(&self) -> usize;
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;

    fn hessian_vector(&self, theta: &[f64], v: &GradVector) -> Result<GradVector> {
        finite_difference_hvp(self, theta, v)
    }
}

fn check_lengths<O: GradientOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    v: &GradVector,
) -> Result<()> {
    if v.len() != oracle.dim() || theta.len() != oracle.dim() {
        return Err(Error::Dimension(format!(
            "hvp expects length {}, got theta {} and v {}",
            oracle.dim(),
            theta.len(),
            v.len()
        )));
    }
    Ok(())
}

/// Mean cross-entropy of a fixed batch as a function of the parameters.
pub struct BatchObjective<'a> {
    arch: &'a Architecture,
    batch: &'a Batch,
}

impl<'a> BatchObjective<'a> {
    pub fn new(arch: &'a Architecture, batch: &'a Batch) -> Result<Self> {
        batch.check_against(arch)?;
        Ok(BatchObjective { arch, batch })
    }
}

impl GradientOracle for BatchObjective<'_> {
    fn dim(&self) -> usize {
        self.arch.num_params()
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let model = ModelParams::from_flat(self.arch.clone(), theta.to_vec())?;
        Ok(grad(&model, self.batch)?.into_inner())
    }

    fn hessian_vector(&self, theta: &[f64], v: &GradVector) -> Result<GradVector> {
        check_lengths(self, theta, v)?;
        let model = ModelParams::from_flat(self.arch.clone(), theta.to_vec())?;
        let out = GradVector::new(hessian_vector(&model, self.batch, v.as_slice())?);
        if !out.is_finite() {
            return Err(Error::NonFinite("hessian-vector product"));
        }
        Ok(out)
    }
}

/// Hessian-vector product of `oracle` at `theta`.
pub fn hvp_at<O: GradientOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    v: &GradVector,
) -> Result<GradVector> {
    oracle.hessian_vector(theta, v)
}

/// Hessian-vector product by central differences of the gradient along the
/// unit direction, with step `1e-4 * max(1, |theta|_inf)`.
pub fn finite_difference_hvp<O: GradientOracle + ?Sized>(
    oracle: &O,
    theta: &[f64],
    v: &GradVector,
) -> Result<GradVector> {
    check_lengths(oracle, theta, v)?;
    let norm = v.norm();
    if norm == 0.0 {
        return Ok(GradVector::zeros(v.len()));
    }
    let scale = theta.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    let eps = 1e-4 * scale;
    let step = eps / norm;
    let plus: Vec<f64> = theta
        .iter()
        .zip(v.as_slice())
        .map(|(t, d)| t + step * d)
        .collect();
    let minus: Vec<f64> = theta
        .iter()
        .zip(v.as_slice())
        .map(|(t, d)| t - step * d)
        .collect();
    let gp = oracle.gradient(&plus)?;
    let gm = oracle.gradient(&minus)?;
    let factor = norm / (2.0 * eps);
    let out = GradVector::new(gp.iter().zip(&gm).map(|(a, b)| (a - b) * factor).collect());
    if !out.is_finite() {
        return Err(Error::NonFinite("hessian-vector product"));
    }
    Ok(out)
}

pub fn hvp(model: &ModelParams, batch: &Batch, v: &GradVector) -> Result<GradVector> {
    let objective = BatchObjective::new(model.architecture(), batch)?;
    hvp_at(&objective, model.as_slice(), v)
}

/// `0.5 * theta^T A theta` for a symmetric row-major `A`; gradient `A theta`.
/// Used as an analytic surrogate when checking curvature estimators.
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    n: usize,
    matrix: Vec<f64>,
}

impl QuadraticObjective {
    pub fn new(matrix: Vec<f64>, n: usize) -> Result<Self> {
        if matrix.len() != n * n {
            return Err(Error::Dimension(format!("expected {n}x{n} matrix")));
        }
        Ok(QuadraticObjective { n, matrix })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut matrix = vec![0.0; n * n];
        for (i, &d) in diag.iter().enumerate() {
            matrix[i * n + i] = d;
        }
        QuadraticObjective { n, matrix }
    }
}

impl GradientOracle for QuadraticObjective {
    fn dim(&self) -> usize {
        self.n
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.n {
            return Err(Error::Dimension("theta length".into()));
        }
        Ok(self
            .matrix
            .chunks_exact(self.n)
            .map(|row| crate::linalg::dot(row, theta))
            .collect())
    }

    fn hessian_vector(&self, theta: &[f64], v: &GradVector) -> Result<GradVector> {
        check_lengths(self, theta, v)?;
        Ok(GradVector::new(self.gradient(v.as_slice())?))
    }
}
