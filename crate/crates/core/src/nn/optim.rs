use super::{GradVector, ModelParams};
use crate::{Error, Result};

fn check_step(model: &ModelParams, grad: &GradVector, lr: f64) -> Result<()> {
    if grad.len() != model.num_params() {
        return Err(Error::Dimension(format!(
            "gradient has {} entries, model has {}",
            grad.len(),
            model.num_params()
        )));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate {lr} must be finite and >= 0"
        )));
    }
    Ok(())
}

/// `theta -= lr * g`. The model is left untouched if the result would be
/// non-finite.
pub fn sgd_step(model: &mut ModelParams, grad: &GradVector, lr: f64) -> Result<()> {
    check_step(model, grad, lr)?;
    let next: Vec<f64> = model
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(t, g)| t - lr * g)
        .collect();
    if next.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sgd step"));
    }
    model.as_mut_slice().copy_from_slice(&next);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam update. On a non-finite result neither the model nor
/// the state is modified.
pub fn adam_step(
    model: &mut ModelParams,
    grad: &GradVector,
    state: &mut AdamState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    check_step(model, grad, lr)?;
    if state.m.is_empty() {
        *state = AdamState::new(model.num_params());
    }
    if state.m.len() != model.num_params() {
        return Err(Error::Dimension(
            "optimizer state does not match model".into(),
        ));
    }
    let t = state.t + 1;
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    let mut next = model.flatten();
    for (((theta, g), m), v) in next.iter_mut().zip(grad.as_slice()).zip(&mut m).zip(&mut v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *theta -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    if next.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("adam step"));
    }
    model.as_mut_slice().copy_from_slice(&next);
    *state = AdamState { m, v, t };
    Ok(())
}
