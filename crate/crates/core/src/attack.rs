//! Source inference attack: attribute each known member record to the client
//! whose model gives it the lowest loss.

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn::{per_example_loss, Batch, ModelParams};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub input: Vec<f64>,
    pub label: usize,
    /// Client whose shard the record came from.
    pub source: usize,
    /// Row of the record within that client's shard.
    pub shard_row: usize,
}

/// Records sampled once per experiment, grouped by source in client order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSet {
    pub records: Vec<TargetRecord>,
    pub n_per_client: usize,
    pub clients: usize,
}

impl TargetSet {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// All records as one batch, in record order.
    pub fn batch(&self) -> Result<Batch> {
        let dim = self
            .records
            .first()
            .map(|r| r.input.len())
            .ok_or(Error::Undefined("empty target set"))?;
        let mut inputs = Array2::zeros((self.records.len(), dim));
        for (mut row, r) in inputs.rows_mut().into_iter().zip(&self.records) {
            if r.input.len() != dim {
                return Err(Error::Dimension("target inputs differ in width".into()));
            }
            row.assign(&ndarray::ArrayView1::from(&r.input));
        }
        Batch::new(inputs, self.records.iter().map(|r| r.label).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: TargetSet = serde_json::from_str(text)?;
        for r in &set.records {
            if r.source >= set.clients {
                return Err(Error::InvalidArgument(format!(
                    "record source {} outside {} clients",
                    r.source, set.clients
                )));
            }
        }
        Ok(set)
    }
}

/// Sample `n_per_client` distinct rows from every shard.
pub fn select_targets<R: Rng + ?Sized>(
    shards: &[Batch],
    n_per_client: usize,
    rng: &mut R,
) -> Result<TargetSet> {
    let mut records = Vec::with_capacity(shards.len() * n_per_client);
    for (source, shard) in shards.iter().enumerate() {
        if shard.len() < n_per_client {
            return Err(Error::InvalidArgument(format!(
                "client {source} has {} rows, fewer than {n_per_client} targets",
                shard.len()
            )));
        }
        let mut rows = index::sample(rng, shard.len(), n_per_client).into_vec();
        rows.sort_unstable();
        for row in rows {
            records.push(TargetRecord {
                input: shard.inputs().row(row).to_vec(),
                label: shard.labels()[row],
                source,
                shard_row: row,
            });
        }
    }
    Ok(TargetSet {
        records,
        n_per_client,
        clients: shards.len(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Lowest client id among the minimisers.
    #[default]
    LowestId,
    /// Uniform among the minimisers, seeded per call.
    Random(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiaRoundResult {
    /// Fraction of each client's targets attributed back to it.
    pub accuracy: Vec<f64>,
    /// Mean loss of each client's own model on its own targets.
    pub target_loss: Vec<f64>,
    /// `attribution[true][predicted]` counts.
    pub attribution: Vec<Vec<usize>>,
}

impl SiaRoundResult {
    pub fn mean_accuracy(&self) -> f64 {
        let (hits, total) = self
            .attribution
            .iter()
            .enumerate()
            .fold((0, 0), |(h, t), (i, row)| {
                (h + row[i], t + row.iter().sum::<usize>())
            });
        hits as f64 / total as f64
    }
}

/// Loss of every target under every model: `losses[model][record]`.
pub fn loss_matrix(models: &[ModelParams], targets: &TargetSet) -> Result<Vec<Vec<f64>>> {
    let batch = targets.batch()?;
    models
        .par_iter()
        .map(|m| per_example_loss(m, &batch))
        .collect()
}

/// Argmin attribution from a precomputed loss matrix. NaN losses rank last.
pub fn attribute(
    losses: &[Vec<f64>],
    targets: &TargetSet,
    tie_break: TieBreak,
) -> Result<SiaRoundResult> {
    let k = losses.len();
    if k < 2 {
        return Err(Error::InvalidArgument(
            "attack needs at least two client models".into(),
        ));
    }
    if targets.is_empty() {
        return Err(Error::Undefined("no target records"));
    }
    if targets.clients != k {
        return Err(Error::Dimension(format!(
            "{k} models but targets drawn from {} clients",
            targets.clients
        )));
    }
    if losses.iter().any(|row| row.len() != targets.len()) {
        return Err(Error::Dimension("loss rows must cover every target".into()));
    }
    let mut tie_rng = match tie_break {
        TieBreak::LowestId => None,
        TieBreak::Random(seed) => Some(crate::rng::seeded(seed)),
    };
    let mut attribution = vec![vec![0usize; k]; k];
    let mut own_loss = vec![0.0; k];
    let mut own_count = vec![0usize; k];
    for (t, record) in targets.records.iter().enumerate() {
        // A model whose loss is NaN can never be the most likely source.
        let column: Vec<f64> = losses
            .iter()
            .map(|row| {
                if row[t].is_nan() {
                    f64::INFINITY
                } else {
                    row[t]
                }
            })
            .collect();
        let best = column.iter().copied().fold(f64::INFINITY, f64::min);
        let minimisers: Vec<usize> = (0..k).filter(|&i| column[i] == best).collect();
        let predicted = match tie_rng.as_mut() {
            Some(r) if minimisers.len() > 1 => minimisers[r.random_range(0..minimisers.len())],
            _ => minimisers[0],
        };
        attribution[record.source][predicted] += 1;
        own_loss[record.source] += column[record.source];
        own_count[record.source] += 1;
    }
    let accuracy = attribution
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                f64::NAN
            } else {
                row[i] as f64 / total as f64
            }
        })
        .collect();
    let target_loss = own_loss
        .iter()
        .zip(&own_count)
        .map(|(&l, &c)| if c == 0 { f64::NAN } else { l / c as f64 })
        .collect();
    Ok(SiaRoundResult {
        accuracy,
        target_loss,
        attribution,
    })
}

/// Run the attack with the given client models against `targets`.
pub fn sia_round(
    models: &[ModelParams],
    targets: &TargetSet,
    tie_break: TieBreak,
) -> Result<SiaRoundResult> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument(
            "attack needs at least two client models".into(),
        ));
    }
    if targets.is_empty() {
        return Err(Error::Undefined("no target records"));
    }
    attribute(&loss_matrix(models, targets)?, targets, tie_break)
}
