//! Local client training with the rank-gated Jacobian penalty.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::nn::{
    adam_step, forward, jacobian_input_spectral_norm, loss_ce, regularized_loss_and_grad, sgd_step,
    spectral_norm_estimate, AdamConfig, AdamState, Batch, ModelParams,
};
use crate::{rng, Error, Result};

/// A mean epoch loss above this multiple of the starting loss counts as
/// divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Floor on the starting loss used by the divergence test, so that a client
/// starting near zero loss is not flagged for ordinary noise.
pub const DIVERGENCE_LOSS_FLOOR: f64 = 0.1;
/// Rows used when recording the final penalty of a client.
const FINAL_PENALTY_ROWS: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(Error::InvalidArgument(format!(
                "unknown optimizer {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Adam => "adam",
            Optimizer::Sgd => "sgd",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    /// Impact factor of the penalty.
    pub beta: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Power iterations per penalty estimate.
    pub power_iters: usize,
    pub optimizer: Optimizer,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            beta: 0.0,
            local_epochs: 1,
            batch_size: 64,
            lr: 0.001,
            power_iters: 5,
            optimizer: Optimizer::Adam,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(
                "beta must be finite and >= 0".into(),
            ));
        }
        if self.local_epochs == 0 || self.batch_size == 0 || self.power_iters == 0 {
            return Err(Error::InvalidArgument(
                "local_epochs, batch_size and power_iters must be >= 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument("lr must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientStats {
    pub last_train_loss: f64,
    pub last_penalty: f64,
}

/// One client's shard, current model and feedback rank.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    shard: Batch,
    pub model: ModelParams,
    rho: f64,
    optimizer: AdamState,
    pub stats: ClientStats,
}

impl ClientState {
    pub fn new(id: usize, shard: Batch, model: ModelParams) -> Result<Self> {
        if shard.dim() != model.architecture().input_dim() {
            return Err(Error::Dimension(
                "shard width does not match the model".into(),
            ));
        }
        let optimizer = AdamState::new(model.num_params());
        Ok(ClientState {
            id,
            shard,
            model,
            rho: 0.0,
            optimizer,
            stats: ClientStats::default(),
        })
    }

    pub fn shard(&self) -> &Batch {
        &self.shard
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn set_rho(&mut self, rho: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidArgument(format!("rho {rho} outside [0, 1]")));
        }
        self.rho = rho;
        Ok(())
    }

    /// Replace the model with a fresh copy of the global one and reset the
    /// optimizer moments.
    pub fn receive_global(&mut self, global: &ModelParams) {
        self.model = global.clone();
        self.optimizer = AdamState::new(global.num_params());
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub base: f64,
    pub penalty: f64,
}

/// `base + beta * rho * ||J||` on `batch`.
pub fn regularized_loss(
    model: &ModelParams,
    batch: &Batch,
    rho: f64,
    beta: f64,
    power_iters: usize,
) -> Result<LossTerms> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("rho {rho} outside [0, 1]")));
    }
    if beta.is_nan() || beta < 0.0 {
        return Err(Error::InvalidArgument("beta must be >= 0".into()));
    }
    let logits = forward(model, batch)?;
    let base = loss_ce(logits.view(), batch.labels())?;
    let penalty = jacobian_input_spectral_norm(model, batch, power_iters)?;
    Ok(LossTerms {
        total: base + beta * rho * penalty,
        base,
        penalty,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Size-weighted mean regularized loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    pub epoch_base: Vec<f64>,
    /// Mean penalty per epoch; zero when the penalty was inactive.
    pub epoch_penalty: Vec<f64>,
    /// Penalty of the final model on (a prefix of) the shard.
    pub final_penalty: f64,
    pub steps: usize,
    pub diverged: bool,
}

fn optimizer_step(
    state: &mut ClientState,
    grad: &crate::nn::GradVector,
    cfg: &ClientConfig,
) -> Result<()> {
    match cfg.optimizer {
        Optimizer::Adam => adam_step(
            &mut state.model,
            grad,
            &mut state.optimizer,
            cfg.lr,
            AdamConfig::default(),
        ),
        Optimizer::Sgd => sgd_step(&mut state.model, grad, cfg.lr),
    }
}

/// Minibatch training of `state.model` on its shard for `cfg.local_epochs`.
///
/// Shuffling draws from `rng`; penalty directions come from a stream seeded
/// by one draw of `rng` taken up front. When `beta * rho == 0` the penalty is
/// never evaluated, which makes training identical to a plain client.
/// Divergence stops training early and keeps the last finite model.
pub fn local_train<R: Rng + ?Sized>(
    state: &mut ClientState,
    cfg: &ClientConfig,
    rng: &mut R,
) -> Result<TrainStats> {
    cfg.validate()?;
    let weight = cfg.beta * state.rho;
    let mut penalty_rng = rng::Rng::seed_from_u64(rng.random());
    let n = state.shard.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = TrainStats::default();
    let mut initial: Option<f64> = None;

    'epochs: for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        let (mut total, mut base, mut penalty) = (0.0, 0.0, 0.0);
        for rows in order.chunks(cfg.batch_size) {
            let batch = state.shard.select(rows)?;
            let step = if weight != 0.0 {
                spectral_norm_estimate(&state.model, &batch, cfg.power_iters, &mut penalty_rng)
                    .and_then(|est| {
                        regularized_loss_and_grad(
                            &state.model,
                            &batch,
                            Some(est.directions.view()),
                            weight,
                        )
                    })
            } else {
                regularized_loss_and_grad(&state.model, &batch, None, 0.0)
            };
            let loss = match step {
                Ok(loss) if loss.total.is_finite() => loss,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    stats.diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            initial.get_or_insert(loss.total);
            match optimizer_step(state, &loss.grad, cfg) {
                Ok(()) => stats.steps += 1,
                Err(Error::NonFinite(_)) => {
                    stats.diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            let w = rows.len() as f64 / n as f64;
            total += w * loss.total;
            base += w * loss.base;
            penalty += w * loss.penalty;
        }
        stats.epoch_losses.push(total);
        stats.epoch_base.push(base);
        stats.epoch_penalty.push(penalty);
        let threshold = DIVERGENCE_FACTOR * initial.unwrap_or(0.0).max(DIVERGENCE_LOSS_FLOOR);
        if !total.is_finite() || total > threshold {
            stats.diverged = true;
            break;
        }
    }

    let rows: Vec<usize> = (0..n.min(FINAL_PENALTY_ROWS)).collect();
    stats.final_penalty = match jacobian_input_spectral_norm(
        &state.model,
        &state.shard.select(&rows)?,
        cfg.power_iters,
    ) {
        Ok(p) => p,
        Err(Error::NonFinite(_)) => {
            stats.diverged = true;
            f64::NAN
        }
        Err(e) => return Err(e),
    };
    state.stats = ClientStats {
        last_train_loss: stats.epoch_losses.last().copied().unwrap_or(f64::NAN),
        last_penalty: stats.final_penalty,
    };
    Ok(stats)
}
