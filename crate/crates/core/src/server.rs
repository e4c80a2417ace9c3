//! Server-side aggregation: FedAvg, PCA-distance adaptive weighting and the
//! lightweight rank-based rule (ALA).

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, symmetric_eigen};
use crate::nn::{GradVector, ModelParams};
use crate::{Error, Result};

/// Fraction of centered update energy the retained components must explain.
pub const PCA_VARIANCE_MASS: f64 = 0.9;

/// Eigenvalues below this fraction of the largest are treated as zero.
const EIGEN_FLOOR: f64 = 1e-12;

/// A point of the probability simplex over clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidArgument("no aggregation weights".into()));
        }
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidArgument(
                "aggregation weights must be finite and >= 0".into(),
            ));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "aggregation weights sum to {sum}"
            )));
        }
        Ok(AggregationWeights(w))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("no clients".into()));
        }
        Ok(AggregationWeights(vec![1.0 / k as f64; k]))
    }

    /// Normalize nonnegative scores.
    fn normalized(scores: Vec<f64>) -> Result<Self> {
        // Exact ties map to exactly 1/K.
        if scores.windows(2).all(|w| w[0] == w[1]) {
            return AggregationWeights::uniform(scores.len());
        }
        let total: f64 = scores.iter().sum();
        AggregationWeights::new(scores.into_iter().map(|s| s / total).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Convex combination of client models, summed in client order.
///
/// Each coordinate is clamped to the range spanned by the inputs so that
/// rounding never pushes it outside.
pub fn weighted_average(
    models: &[ModelParams],
    weights: &AggregationWeights,
) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to aggregate".into()))?;
    if weights.len() != models.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    if models
        .iter()
        .any(|m| m.architecture() != first.architecture())
    {
        return Err(Error::Dimension(
            "client models have different architectures".into(),
        ));
    }
    let w = weights.as_slice();
    let mut out: Vec<f64> = first.as_slice().iter().map(|x| w[0] * x).collect();
    let mut lo = first.flatten();
    let mut hi = first.flatten();
    for (model, &wk) in models.iter().zip(w).skip(1) {
        for (((o, l), h), &x) in out
            .iter_mut()
            .zip(&mut lo)
            .zip(&mut hi)
            .zip(model.as_slice())
        {
            *o += wk * x;
            *l = l.min(x);
            *h = h.max(x);
        }
    }
    for ((o, l), h) in out.iter_mut().zip(&lo).zip(&hi) {
        *o = o.clamp(*l, *h);
    }
    ModelParams::from_flat(first.architecture().clone(), out)
}

pub fn fedavg_weights(sizes: &[usize]) -> Result<AggregationWeights> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InvalidArgument(
            "FedAvg needs K >= 1 positive sizes".into(),
        ));
    }
    let total: usize = sizes.iter().sum();
    AggregationWeights::new(sizes.iter().map(|&s| s as f64 / total as f64).collect())
}

/// Shard-size weighted mean.
pub fn fedavg_aggregate(models: &[ModelParams], sizes: &[usize]) -> Result<ModelParams> {
    if models.len() != sizes.len() {
        return Err(Error::Dimension("one size per model required".into()));
    }
    weighted_average(models, &fedavg_weights(sizes)?)
}

/// Distance of every client update from the principal subspace of all
/// updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaDistances {
    pub p: Vec<f64>,
    /// Number of retained principal components.
    pub components: usize,
}

/// Smallest `m` whose leading eigenvalues hold [`PCA_VARIANCE_MASS`] of the
/// total, capped at `K - 2` and floored at 1.
pub fn select_components(eigenvalues: &[f64]) -> usize {
    let k = eigenvalues.len();
    let total: f64 = eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let mut m = k;
    if total > 0.0 {
        let mut acc = 0.0;
        for (i, l) in eigenvalues.iter().enumerate() {
            acc += l.max(0.0);
            if acc >= PCA_VARIANCE_MASS * total {
                m = i + 1;
                break;
            }
        }
    } else {
        m = 1;
    }
    m.min(k.saturating_sub(2)).max(1)
}

struct CenteredGram {
    k: usize,
    values: Vec<f64>,
    vectors: Vec<Vec<f64>>,
}

fn centered_gram(updates: &[GradVector]) -> Result<CenteredGram> {
    let k = updates.len();
    if k < 2 {
        return Err(Error::InvalidArgument(
            "PCA distances need at least two updates".into(),
        ));
    }
    let d = updates[0].len();
    if updates.iter().any(|u| u.len() != d) {
        return Err(Error::Dimension("updates differ in length".into()));
    }
    let mut mean = vec![0.0; d];
    for u in updates {
        for (m, x) in mean.iter_mut().zip(u.as_slice()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    let centered: Vec<Vec<f64>> = updates
        .iter()
        .map(|u| u.as_slice().iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let g = dot(&centered[i], &centered[j]);
            gram[i * k + j] = g;
            gram[j * k + i] = g;
        }
    }
    let eig = symmetric_eigen(&gram, k);
    let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let values = eig
        .values
        .iter()
        .map(|&l| if l > EIGEN_FLOOR * top { l } else { 0.0 })
        .collect();
    Ok(CenteredGram {
        k,
        values,
        vectors: eig.vectors,
    })
}

impl CenteredGram {
    /// Residual norms after projecting onto the top `m` components. Works in
    /// the K-dimensional Gram space: the squared residual of client `i` is
    /// the energy of the discarded eigenpairs at coordinate `i`.
    fn residuals(&self, m: usize) -> Vec<f64> {
        (0..self.k)
            .map(|i| {
                self.values
                    .iter()
                    .zip(&self.vectors)
                    .skip(m)
                    .map(|(l, q)| l * q[i] * q[i])
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

pub fn pca_distances(updates: &[GradVector]) -> Result<PcaDistances> {
    let gram = centered_gram(updates)?;
    let m = select_components(&gram.values);
    Ok(PcaDistances {
        p: gram.residuals(m),
        components: m,
    })
}

/// PCA distances with an explicit component count.
pub fn pca_distances_with_components(updates: &[GradVector], m: usize) -> Result<PcaDistances> {
    let gram = centered_gram(updates)?;
    if m == 0 || m > gram.k {
        return Err(Error::InvalidArgument(format!(
            "component count {m} outside 1..={}",
            gram.k
        )));
    }
    Ok(PcaDistances {
        p: gram.residuals(m),
        components: m,
    })
}

/// Inverse-distance weights `1 / (p_k + eps)`, normalized, with
/// `eps = 1e-8 + 1e-3 * mean(p)`.
pub fn adaptive_weights(p: &[f64]) -> Result<AggregationWeights> {
    if p.len() < 2 {
        return Err(Error::InvalidArgument(
            "adaptive weights need at least two clients".into(),
        ));
    }
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InvalidArgument(
            "PCA distances must be finite and >= 0".into(),
        ));
    }
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    let eps = 1e-8 + 1e-3 * mean;
    AggregationWeights::normalized(p.iter().map(|x| 1.0 / (x + eps)).collect())
}

/// ALA weights `(1 - rho_k) / sum_j (1 - rho_j)`. Returns `true` in the
/// second slot when every client is at rank 1 and uniform weights were used.
pub fn ala_weights(rho: &[f64]) -> Result<(AggregationWeights, bool)> {
    if rho.is_empty() {
        return Err(Error::InvalidArgument("no clients".into()));
    }
    if rho.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::InvalidArgument(
            "overfitting ranks must lie in [0, 1]".into(),
        ));
    }
    let slack: Vec<f64> = rho.iter().map(|r| 1.0 - r).collect();
    if slack.iter().sum::<f64>() == 0.0 {
        return Ok((AggregationWeights::uniform(rho.len())?, true));
    }
    Ok((AggregationWeights::normalized(slack)?, false))
}

pub fn ala_aggregate(models: &[ModelParams], rho: &[f64]) -> Result<(ModelParams, bool)> {
    if models.len() != rho.len() {
        return Err(Error::Dimension("one rank per model required".into()));
    }
    let (w, fallback) = ala_weights(rho)?;
    Ok((weighted_average(models, &w)?, fallback))
}

/// Spread of the per-client risks around their mean plus the mean itself.
pub fn finp_server_objective(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::InvalidArgument("objective needs K >= 1".into()));
    }
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    let spread = p
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        .sqrt();
    Ok(spread + mean.abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    FedAvg,
    Pca,
    Ala,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationOutcome {
    pub model: ModelParams,
    pub weights: AggregationWeights,
    pub distances: Option<PcaDistances>,
    pub objective: Option<f64>,
    /// ALA fell back to uniform weights.
    pub fallback: bool,
}

/// One server aggregation step as run each round.
///
/// `force_uniform` replaces whatever weights the rule picked by `1/K`; the
/// PCA diagnostics are still computed.
pub fn aggregate(
    rule: AggregationRule,
    previous_global: &ModelParams,
    models: &[ModelParams],
    sizes: &[usize],
    rho: &[f64],
    force_uniform: bool,
) -> Result<AggregationOutcome> {
    let (weights, distances, objective, fallback) = match rule {
        AggregationRule::FedAvg => (fedavg_weights(sizes)?, None, None, false),
        AggregationRule::Pca => {
            let updates = models
                .iter()
                .map(|m| GradVector::difference(m, previous_global))
                .collect::<Result<Vec<_>>>()?;
            let d = pca_distances(&updates)?;
            let objective = finp_server_objective(&d.p)?;
            (adaptive_weights(&d.p)?, Some(d), Some(objective), false)
        }
        AggregationRule::Ala => {
            let (w, fallback) = ala_weights(rho)?;
            (w, None, None, fallback)
        }
    };
    let weights = if force_uniform {
        AggregationWeights::uniform(models.len())?
    } else {
        weights
    };
    Ok(AggregationOutcome {
        model: weighted_average(models, &weights)?,
        weights,
        distances,
        objective,
        fallback,
    })
}
