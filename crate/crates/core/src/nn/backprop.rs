//! Forward pass, softmax cross-entropy and the reverse pass.
//!
//! The regularized gradient differentiates `base + w * mean_i ||J_i v_i||`
//! where `J_i` is the input->logits Jacobian at row `i` and `v_i` is a fixed
//! unit direction (normally the last power-iteration vector). `J_i v_i` is
//! produced by a tangent (forward-mode) sweep; its parameter gradient is
//! obtained by reversing that sweep and then the primal sweep.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use super::model::{Activation, LayerLayout};
use super::{Batch, GradVector, ModelParams};
use crate::{Error, Result};

pub(crate) struct Trace {
    /// Pre-activations `z_l`, one per layer; the last one holds the logits.
    pub pre: Vec<Array2<f64>>,
    /// Layer inputs: `post[0]` is the batch, `post[l]` = act(`pre[l-1]`).
    pub post: Vec<Array2<f64>>,
    pub layouts: Vec<LayerLayout>,
    pub activation: Activation,
}

impl Trace {
    pub fn logits(&self) -> &Array2<f64> {
        self.pre.last().expect("at least one layer")
    }

    pub fn num_layers(&self) -> usize {
        self.layouts.len()
    }
}

pub(crate) fn forward_trace(model: &ModelParams, inputs: ArrayView2<'_, f64>) -> Trace {
    let layouts = model.architecture().layouts();
    let activation = model.architecture().activation;
    let last = layouts.len() - 1;
    let mut pre = Vec::with_capacity(layouts.len());
    let mut post = Vec::with_capacity(layouts.len());
    post.push(inputs.to_owned());
    for (l, layout) in layouts.iter().enumerate() {
        let (w, b) = model.layer_views(layout);
        let mut z = post[l].dot(&w.t());
        z += &b;
        if l < last {
            post.push(z.mapv(|v| activation.apply(v)));
        }
        pre.push(z);
    }
    Trace {
        pre,
        post,
        layouts,
        activation,
    }
}

pub fn forward(model: &ModelParams, batch: &Batch) -> Result<Array2<f64>> {
    if batch.dim() != model.architecture().input_dim() {
        return Err(Error::Dimension(format!(
            "batch width {} but model expects {}",
            batch.dim(),
            model.architecture().input_dim()
        )));
    }
    let mut trace = forward_trace(model, batch.inputs());
    Ok(trace.pre.pop().expect("at least one layer"))
}

fn check_labels(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
    if logits.nrows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.ncols()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside [0, {})",
            logits.ncols()
        )));
    }
    Ok(())
}

/// Per-row cross-entropy and softmax probabilities.
fn softmax_ce(logits: ArrayView2<'_, f64>, labels: &[usize]) -> (Vec<f64>, Array2<f64>) {
    let mut probs = Array2::zeros(logits.raw_dim());
    let mut losses = Vec::with_capacity(labels.len());
    for ((row, mut p), &y) in logits.rows().into_iter().zip(probs.rows_mut()).zip(labels) {
        let (arg, max) =
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(ai, am), (i, &v)| {
                    if v > am {
                        (i, v)
                    } else {
                        (ai, am)
                    }
                });
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != arg)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        let log_norm = rest.ln_1p();
        losses.push((max - row[y]) + log_norm);
        for (pi, &v) in p.iter_mut().zip(row) {
            *pi = (v - max - log_norm).exp();
        }
    }
    (losses, probs)
}

/// Mean softmax cross-entropy.
pub fn loss_ce(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let (losses, _) = softmax_ce(logits, labels);
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Cross-entropy of every row under `model`.
pub fn per_example_loss(model: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    let logits = forward(model, batch)?;
    check_labels(logits.view(), batch.labels())?;
    Ok(softmax_ce(logits.view(), batch.labels()).0)
}

/// Arg-max class per row (lowest index on ties).
pub fn predict(model: &ModelParams, batch: &Batch) -> Result<Vec<usize>> {
    let logits = forward(model, batch)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (j, &x)| if x > row[best] { j } else { best })
        })
        .collect())
}

/// Fraction of rows whose predicted class equals the label.
pub fn accuracy(model: &ModelParams, batch: &Batch) -> Result<f64> {
    let pred = predict(model, batch)?;
    let hits = pred
        .iter()
        .zip(batch.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Reverse sweep through the primal network.
///
/// `seed` is dL/dlogits; `extra[l]` (for hidden layer `l`) is an additional
/// dL/dz_l contribution coming from the tangent sweep.
fn backward_primal(
    model: &ModelParams,
    trace: &Trace,
    seed: Array2<f64>,
    extra: Option<&[Array2<f64>]>,
    grad: &mut [f64],
) {
    let mut zbar = seed;
    for l in (0..trace.num_layers()).rev() {
        let layout = &trace.layouts[l];
        let (w, _) = model.layer_views(layout);
        let gw = zbar.t().dot(&trace.post[l]);
        let w_end = layout.weight + layout.inputs * layout.outputs;
        for (g, v) in grad[layout.weight..w_end].iter_mut().zip(gw.iter()) {
            *g += v;
        }
        let gb = zbar.sum_axis(Axis(0));
        for (g, v) in grad[layout.bias..layout.bias + layout.outputs]
            .iter_mut()
            .zip(gb.iter())
        {
            *g += v;
        }
        if l > 0 {
            let mut next = zbar.dot(&w);
            let act = trace.activation;
            Zip::from(&mut next)
                .and(&trace.pre[l - 1])
                .for_each(|a, &z| *a *= act.derivative(z));
            if let Some(extra) = extra {
                next += &extra[l - 1];
            }
            zbar = next;
        }
    }
}

pub(crate) struct Tangent {
    /// `inputs[l]` is the tangent entering layer `l`; `inputs[0]` = directions.
    pub inputs: Vec<Array2<f64>>,
    /// Linear tangent `u_l = inputs[l] W_l^T` before the activation derivative.
    pub linear: Vec<Array2<f64>>,
}

impl Tangent {
    pub fn output(&self) -> &Array2<f64> {
        self.linear.last().expect("at least one layer")
    }
}

pub(crate) fn tangent_forward(
    model: &ModelParams,
    trace: &Trace,
    dirs: ArrayView2<'_, f64>,
) -> Tangent {
    let last = trace.num_layers() - 1;
    let act = trace.activation;
    let mut inputs = vec![dirs.to_owned()];
    let mut linear = Vec::with_capacity(trace.num_layers());
    for l in 0..trace.num_layers() {
        let (w, _) = model.layer_views(&trace.layouts[l]);
        let u = inputs[l].dot(&w.t());
        if l < last {
            let mut t = u.clone();
            Zip::from(&mut t)
                .and(&trace.pre[l])
                .for_each(|t, &z| *t *= act.derivative(z));
            inputs.push(t);
        }
        linear.push(u);
    }
    Tangent { inputs, linear }
}

/// Reverse the tangent sweep. `seed` is dP/d(J v); parameter gradients are
/// accumulated into `grad` and the returned arrays are the dP/dz_l
/// contributions for each hidden layer.
fn backward_tangent(
    model: &ModelParams,
    trace: &Trace,
    tangent: &Tangent,
    seed: Array2<f64>,
    grad: &mut [f64],
) -> Vec<Array2<f64>> {
    let last = trace.num_layers() - 1;
    let act = trace.activation;
    let mut extra: Vec<Array2<f64>> = (0..last)
        .map(|l| Array2::zeros(trace.pre[l].raw_dim()))
        .collect();
    let mut tbar = seed;
    for l in (0..=last).rev() {
        let layout = &trace.layouts[l];
        let ubar = if l == last {
            tbar
        } else {
            let mut ubar = tbar.clone();
            Zip::from(&mut ubar)
                .and(&mut extra[l])
                .and(&tbar)
                .and(&trace.pre[l])
                .and(&tangent.linear[l])
                .for_each(|ub, ex, &tb, &z, &u| {
                    *ub = tb * act.derivative(z);
                    *ex = tb * act.second_derivative(z) * u;
                });
            ubar
        };
        let gw = ubar.t().dot(&tangent.inputs[l]);
        let w_end = layout.weight + layout.inputs * layout.outputs;
        for (g, v) in grad[layout.weight..w_end].iter_mut().zip(gw.iter()) {
            *g += v;
        }
        let (w, _) = model.layer_views(layout);
        tbar = if l > 0 { ubar.dot(&w) } else { ubar };
    }
    extra
}

pub(crate) fn row_norms(a: &Array2<f64>) -> Vec<f64> {
    a.rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// Loss terms and gradient of `base + penalty_weight * penalty`.
#[derive(Clone, Debug)]
pub struct RegularizedLoss {
    pub total: f64,
    pub base: f64,
    /// `mean_i ||J_i v_i||`, zero when no directions were supplied.
    pub penalty: f64,
    pub grad: GradVector,
}

pub fn loss_and_grad(model: &ModelParams, batch: &Batch) -> Result<(f64, GradVector)> {
    let r = regularized_loss_and_grad(model, batch, None, 0.0)?;
    Ok((r.base, r.grad))
}

pub fn grad(model: &ModelParams, batch: &Batch) -> Result<GradVector> {
    Ok(loss_and_grad(model, batch)?.1)
}

/// Cross-entropy plus the frozen-direction Jacobian penalty.
///
/// `directions` holds one unit input-space vector per batch row; they are
/// treated as constants when differentiating.
pub fn regularized_loss_and_grad(
    model: &ModelParams,
    batch: &Batch,
    directions: Option<ArrayView2<'_, f64>>,
    penalty_weight: f64,
) -> Result<RegularizedLoss> {
    batch.check_against(model.architecture())?;
    let n = batch.len() as f64;
    let trace = forward_trace(model, batch.inputs());
    let (losses, probs) = softmax_ce(trace.logits().view(), batch.labels());
    let base = losses.iter().sum::<f64>() / n;

    let mut seed = probs;
    for (mut row, &y) in seed.rows_mut().into_iter().zip(batch.labels()) {
        row[y] -= 1.0;
    }
    seed /= n;

    let mut grad = vec![0.0; model.num_params()];
    let mut penalty = 0.0;
    let mut extra = None;
    if let Some(dirs) = directions {
        if dirs.dim() != batch.inputs().dim() {
            return Err(Error::Dimension(
                "directions must match the batch inputs".into(),
            ));
        }
        let tangent = tangent_forward(model, &trace, dirs);
        let out = tangent.output();
        let norms = row_norms(out);
        penalty = norms.iter().sum::<f64>() / n;
        if penalty_weight != 0.0 {
            let mut tseed = out.clone();
            for (mut row, &norm) in tseed.rows_mut().into_iter().zip(&norms) {
                let scale = if norm > 0.0 {
                    penalty_weight / (n * norm)
                } else {
                    0.0
                };
                row *= scale;
            }
            extra = Some(backward_tangent(model, &trace, &tangent, tseed, &mut grad));
        }
    }
    backward_primal(model, &trace, seed, extra.as_deref(), &mut grad);

    let grad = GradVector::new(grad);
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(RegularizedLoss {
        total: base + penalty_weight * penalty,
        base,
        penalty,
        grad,
    })
}

/// Exact Hessian-vector product of the mean cross-entropy by a forward sweep
/// of directional derivatives followed by its reverse (the R-operator).
/// Kinks of piecewise-linear activations contribute nothing.
pub(crate) fn hessian_vector(model: &ModelParams, batch: &Batch, v: &[f64]) -> Result<Vec<f64>> {
    batch.check_against(model.architecture())?;
    if v.len() != model.num_params() {
        return Err(Error::Dimension(format!(
            "direction has length {}, model has {} parameters",
            v.len(),
            model.num_params()
        )));
    }
    let n = batch.len() as f64;
    let trace = forward_trace(model, batch.inputs());
    let act = trace.activation;
    let last = trace.num_layers() - 1;
    let dir = ModelParams::from_flat(model.architecture().clone(), v.to_vec())?;

    // Directional derivatives of the pre-activations and layer inputs.
    let mut r_post = vec![Array2::<f64>::zeros(trace.post[0].raw_dim())];
    let mut r_pre = Vec::with_capacity(last + 1);
    for l in 0..=last {
        let layout = &trace.layouts[l];
        let (w, _) = model.layer_views(layout);
        let (dw, db) = dir.layer_views(layout);
        let mut rz = r_post[l].dot(&w.t()) + trace.post[l].dot(&dw.t());
        rz += &db;
        if l < last {
            let mut ra = rz.clone();
            Zip::from(&mut ra)
                .and(&trace.pre[l])
                .for_each(|r, &z| *r *= act.derivative(z));
            r_post.push(ra);
        }
        r_pre.push(rz);
    }

    let (_, probs) = softmax_ce(trace.logits().view(), batch.labels());
    let mut g = probs.clone();
    for (mut row, &y) in g.rows_mut().into_iter().zip(batch.labels()) {
        row[y] -= 1.0;
    }
    g /= n;
    let mut rg = Array2::zeros(probs.raw_dim());
    for ((mut out, p), rz) in rg
        .rows_mut()
        .into_iter()
        .zip(probs.rows())
        .zip(r_pre[last].rows())
    {
        let pr = p.dot(&rz);
        Zip::from(&mut out)
            .and(&p)
            .and(&rz)
            .for_each(|o, &pi, &ri| *o = pi * (ri - pr) / n);
    }

    let mut hv = vec![0.0; model.num_params()];
    for l in (0..=last).rev() {
        let layout = &trace.layouts[l];
        let (w, _) = model.layer_views(layout);
        let (dw, _) = dir.layer_views(layout);
        let hw = rg.t().dot(&trace.post[l]) + g.t().dot(&r_post[l]);
        let w_end = layout.weight + layout.inputs * layout.outputs;
        for (h, x) in hv[layout.weight..w_end].iter_mut().zip(hw.iter()) {
            *h = *x;
        }
        let hb = rg.sum_axis(Axis(0));
        for (h, x) in hv[layout.bias..layout.bias + layout.outputs]
            .iter_mut()
            .zip(hb.iter())
        {
            *h = *x;
        }
        if l > 0 {
            let back = g.dot(&w);
            let r_back = rg.dot(&w) + g.dot(&dw);
            let mut next_g = back.clone();
            let mut next_rg = r_back;
            Zip::from(&mut next_g)
                .and(&mut next_rg)
                .and(&back)
                .and(&trace.pre[l - 1])
                .and(&r_pre[l - 1])
                .for_each(|ng, nrg, &b, &z, &rz| {
                    *ng *= act.derivative(z);
                    *nrg = *nrg * act.derivative(z) + b * act.second_derivative(z) * rz;
                });
            g = next_g;
            rg = next_rg;
        }
    }
    Ok(hv)
}
