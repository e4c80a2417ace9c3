use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use super::backprop::{forward_trace, row_norms, tangent_forward, Trace};
use super::{Batch, ModelParams};
use crate::{rng, Error, Result};

fn check_inputs(model: &ModelParams, inputs: ArrayView2<'_, f64>) -> Result<()> {
    if inputs.ncols() != model.architecture().input_dim() {
        return Err(Error::Dimension(format!(
            "input width {} but model expects {}",
            inputs.ncols(),
            model.architecture().input_dim()
        )));
    }
    Ok(())
}

/// Row-wise input Jacobian-vector products `J_i v_i` (exact forward mode).
pub fn jvp(
    model: &ModelParams,
    inputs: ArrayView2<'_, f64>,
    dirs: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    check_inputs(model, inputs)?;
    if dirs.dim() != inputs.dim() {
        return Err(Error::Dimension("directions must match inputs".into()));
    }
    let trace = forward_trace(model, inputs);
    Ok(tangent_forward(model, &trace, dirs)
        .linear
        .pop()
        .expect("layers"))
}

/// Row-wise vector-Jacobian products `J_i^T u_i` (reverse mode).
pub fn vjp(
    model: &ModelParams,
    inputs: ArrayView2<'_, f64>,
    cotangents: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    check_inputs(model, inputs)?;
    if cotangents.dim() != (inputs.nrows(), model.architecture().output_dim()) {
        return Err(Error::Dimension("cotangents must be n x outputs".into()));
    }
    let trace = forward_trace(model, inputs);
    Ok(vjp_traced(model, &trace, cotangents.to_owned()))
}

fn vjp_traced(model: &ModelParams, trace: &Trace, cotangents: Array2<f64>) -> Array2<f64> {
    let act = trace.activation;
    let mut bar = cotangents;
    for l in (0..trace.num_layers()).rev() {
        let (w, _) = model.layer_views(&trace.layouts[l]);
        let mut next = bar.dot(&w);
        if l > 0 {
            Zip::from(&mut next)
                .and(&trace.pre[l - 1])
                .for_each(|a, &z| *a *= act.derivative(z));
        }
        bar = next;
    }
    bar
}

fn normalize_rows(a: &mut Array2<f64>) -> Vec<f64> {
    let norms = row_norms(a);
    for (mut row, &n) in a.rows_mut().into_iter().zip(&norms) {
        if n > 0.0 {
            row /= n;
        }
    }
    norms
}

/// Result of per-row power iteration on `J_i^T J_i`.
#[derive(Clone, Debug)]
pub struct SpectralEstimate {
    /// Mean of the per-row estimates.
    pub mean: f64,
    pub per_row: Vec<f64>,
    /// Final unit right-singular-vector estimates, one row per example.
    pub directions: Array2<f64>,
}

/// Estimate `sigma_max(J_i)` for every row by alternating Jacobian-vector and
/// vector-Jacobian products, starting from Gaussian directions.
pub fn spectral_norm_estimate<R: Rng + ?Sized>(
    model: &ModelParams,
    batch: &Batch,
    iters: usize,
    rng: &mut R,
) -> Result<SpectralEstimate> {
    if iters == 0 {
        return Err(Error::InvalidArgument(
            "power iteration needs iters >= 1".into(),
        ));
    }
    check_inputs(model, batch.inputs())?;
    let trace = forward_trace(model, batch.inputs());
    let (n, d) = batch.inputs().dim();
    let mut v = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    let norms = normalize_rows(&mut v);
    for (mut row, norm) in v.rows_mut().into_iter().zip(norms) {
        // A zero Gaussian draw is effectively impossible; fall back to e_0.
        if norm == 0.0 {
            row[0] = 1.0;
        }
    }

    for _ in 0..iters {
        let jv = tangent_forward(model, &trace, v.view())
            .linear
            .pop()
            .expect("layers");
        let mut next = vjp_traced(model, &trace, jv);
        let norms = normalize_rows(&mut next);
        // Rows whose J^T J v vanished keep their previous direction.
        for ((mut row, old), &norm) in next.rows_mut().into_iter().zip(v.rows()).zip(&norms) {
            if norm == 0.0 {
                row.assign(&old);
            }
        }
        v = next;
    }
    let jv = tangent_forward(model, &trace, v.view())
        .linear
        .pop()
        .expect("layers");
    let per_row = row_norms(&jv);
    let mean = per_row.iter().sum::<f64>() / n as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite("jacobian spectral norm"));
    }
    Ok(SpectralEstimate {
        mean,
        per_row,
        directions: v,
    })
}

/// Batch-averaged spectral norm of the input->logits Jacobian, with a fixed
/// internal start seed.
pub fn jacobian_input_spectral_norm(
    model: &ModelParams,
    batch: &Batch,
    iters: usize,
) -> Result<f64> {
    let mut rng = rng::seeded(0x5eed_1ac0b);
    Ok(spectral_norm_estimate(model, batch, iters, &mut rng)?.mean)
}
