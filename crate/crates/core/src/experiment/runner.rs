use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DataSource, ExperimentConfig, PartitionMode, TieBreakMode};
use crate::attack::{select_targets, sia_round, SiaRoundResult, TargetSet, TieBreak};
use crate::client::{local_train, ClientState, TrainStats};
use crate::curvature::{curvature_report, estimate_client_curvature, ClientCurvature};
use crate::data::{
    dirichlet_partition, iid_partition, load_csv_with_classes, synth_gaussian_mixture,
    train_test_split, Dataset, Partition,
};
use crate::metrics::{MetricsRow, Summary};
use crate::nn::checkpoint::{self, Lineage};
use crate::nn::{accuracy, Architecture, Batch, ModelParams};
use crate::rng::{self, stream};
use crate::server::{aggregate, AggregationOutcome};
use crate::{Error, Result};

/// Per-client values recorded for one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundRecord {
    pub client: usize,
    pub shard_size: usize,
    /// Rank the client trained with (previous round's feedback).
    pub rho_used: f64,
    pub lambda_max: Option<f64>,
    pub trace: Option<f64>,
    /// Rank computed this round, fed back next round.
    pub rho: Option<f64>,
    pub p: Option<f64>,
    pub weight: f64,
    pub sia_acc: f64,
    pub target_loss: f64,
    pub train_loss: f64,
    pub final_penalty: f64,
    pub steps: usize,
    pub diverged: bool,
}

/// Wall-clock seconds spent in each phase of a round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub train: f64,
    pub attack: f64,
    pub curvature: f64,
    pub aggregation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientRoundRecord>,
    pub metrics: MetricsRow,
    pub objective: Option<f64>,
    pub pca_components: Option<usize>,
    pub ala_fallback: bool,
    pub attribution: Vec<Vec<usize>>,
    /// SHA-256 over the checkpoint encodings of the attacked client models.
    pub sia_models_sha256: String,
    pub global_sha256: String,
    pub timings: PhaseTimings,
}

impl RoundRecord {
    pub fn diverged_clients(&self) -> usize {
        self.clients.iter().filter(|c| c.diverged).count()
    }

    pub fn sia(&self) -> SiaRoundResult {
        SiaRoundResult {
            accuracy: self.clients.iter().map(|c| c.sia_acc).collect(),
            target_loss: self.clients.iter().map(|c| c.target_loss).collect(),
            attribution: self.attribution.clone(),
        }
    }
}

/// Run-level summary written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub seed: u64,
    pub clients: usize,
    #[serde(flatten)]
    pub metrics: Summary,
}

pub struct RunOutput {
    pub config: ExperimentConfig,
    pub records: Vec<RoundRecord>,
    pub summary: RunSummary,
    pub partition: Option<Partition>,
    pub targets: TargetSet,
    pub global: ModelParams,
    pub warnings: Vec<String>,
}

struct Prepared {
    shards: Vec<Batch>,
    train: Batch,
    test: Batch,
    classes: usize,
    partition: Option<Partition>,
}

fn prepare_synthetic(cfg: &ExperimentConfig) -> Result<Prepared> {
    let d = &cfg.data;
    let ds = synth_gaussian_mixture(
        d.classes,
        d.dim,
        d.n_per_class,
        d.separation,
        &mut rng::substream(cfg.seed, &[stream::DATA]),
    )?;
    let (train, test) = train_test_split(
        &ds,
        d.test_fraction,
        &mut rng::substream(cfg.seed, &[stream::SPLIT]),
    )?;
    let mut prng = rng::substream(cfg.seed, &[stream::PARTITION]);
    let partition = match d.partition {
        PartitionMode::Dirichlet => dirichlet_partition(&train, cfg.clients, d.alpha, &mut prng)?,
        PartitionMode::Iid => iid_partition(train.len(), cfg.clients, &mut prng)?,
    };
    let shards = partition
        .shards()
        .iter()
        .map(|rows| Ok(train.subset(rows)?.to_batch()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        shards,
        train: train.to_batch(),
        test: test.to_batch(),
        classes: d.classes,
        partition: Some(partition),
    })
}

/// One `client_XXX.csv` per client; `test.csv` if present, otherwise each
/// client file is split by `data.test_fraction`.
fn prepare_csv(cfg: &ExperimentConfig, dir: &Path) -> Result<Prepared> {
    let classes = (cfg.data.classes > 0).then_some(cfg.data.classes);
    let mut parts = Vec::with_capacity(cfg.clients);
    for k in 0..cfg.clients {
        let path = dir.join(format!("client_{k:03}.csv"));
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing client file {}",
                path.display()
            )));
        }
        parts.push(load_csv_with_classes(&path, classes)?);
    }
    if dir.join(format!("client_{:03}.csv", cfg.clients)).exists() {
        return Err(Error::Config(format!(
            "{} holds more client files than clients = {}",
            dir.display(),
            cfg.clients
        )));
    }
    let test_path = dir.join("test.csv");
    let (shards, test): (Vec<Dataset>, Dataset) = if test_path.exists() {
        let test = load_csv_with_classes(&test_path, classes)?;
        (parts, test)
    } else {
        let mut shards = Vec::new();
        let mut tests = Vec::new();
        for (k, part) in parts.iter().enumerate() {
            let mut r = rng::substream(cfg.seed, &[stream::SPLIT, k as u64]);
            let (train, test) = train_test_split(part, cfg.data.test_fraction, &mut r)?;
            shards.push(train);
            tests.push(test);
        }
        (shards, Dataset::concat(&tests)?)
    };
    let classes = shards
        .iter()
        .map(Dataset::class_count)
        .chain([test.class_count()])
        .max()
        .unwrap_or(0);
    let shards: Vec<Dataset> = shards
        .into_iter()
        .map(|s| Dataset::new(s.features().clone(), s.labels().to_vec(), classes))
        .collect::<Result<_>>()?;
    let train = Dataset::concat(&shards)?;
    Ok(Prepared {
        shards: shards.iter().map(Dataset::to_batch).collect(),
        train: train.to_batch(),
        test: test.to_batch(),
        classes,
        partition: None,
    })
}

fn client_lineage(seed: u64, round: usize, client: Option<usize>) -> Lineage {
    Lineage {
        seed,
        round: Some(round),
        client,
    }
}

/// SHA-256 of the concatenated checkpoint encodings, i.e. of the checkpoint
/// files a run writes for these models.
fn model_hash(models: &[&ModelParams], seed: u64, round: usize, clients: bool) -> Result<String> {
    let mut hasher = Sha256::new();
    for (id, m) in models.iter().enumerate() {
        let client = clients.then_some(id);
        hasher.update(checkpoint::encode(m, &client_lineage(seed, round, client))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::DegenerateStart(_))
}

/// Ranks from curvature estimates. Clients whose estimate failed are treated
/// as maximally overfit; the others are ranked among themselves.
fn ranks_from_curvature(curv: &[Option<ClientCurvature>]) -> Result<Vec<f64>> {
    let finite: Vec<usize> = (0..curv.len())
        .filter(|&k| curv[k].is_some_and(|c| c.lambda_max.is_finite() && c.trace.is_finite()))
        .collect();
    let mut rho = vec![1.0; curv.len()];
    if finite.len() >= 2 {
        let lambdas: Vec<f64> = finite
            .iter()
            .map(|&k| curv[k].unwrap().lambda_max)
            .collect();
        let traces: Vec<f64> = finite.iter().map(|&k| curv[k].unwrap().trace).collect();
        for (&k, r) in finite
            .iter()
            .zip(curvature_report(&lambdas, &traces)?.rho())
        {
            rho[k] = r;
        }
    } else {
        for &k in &finite {
            rho[k] = 0.0;
        }
    }
    Ok(rho)
}

/// Run every round of `cfg`. When `checkpoint_dir` is given, client models as
/// attacked and the aggregated global model are written per round.
pub fn run_experiment(cfg: &ExperimentConfig, checkpoint_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_inner(cfg, checkpoint_dir))
}

fn run_inner(cfg: &ExperimentConfig, checkpoint_dir: Option<&Path>) -> Result<RunOutput> {
    let prepared = match &cfg.data.source {
        DataSource::Synthetic => prepare_synthetic(cfg)?,
        DataSource::Csv(dir) => prepare_csv(cfg, dir)?,
    };
    let k = cfg.clients;
    let mut sizes = Vec::with_capacity(k);
    for s in &prepared.shards {
        sizes.push(s.len());
    }
    let dim = prepared.train.dim();
    let mut layers = vec![dim];
    layers.extend(&cfg.model.hidden);
    layers.push(prepared.classes);
    let arch = Architecture::new(layers, cfg.model.activation)?;
    let mut global = ModelParams::init(arch, &mut rng::substream(cfg.seed, &[stream::INIT]));
    global.round_to_f32();

    let targets = select_targets(
        &prepared.shards,
        cfg.attack.n_per_client,
        &mut rng::substream(cfg.seed, &[stream::TARGETS]),
    )?;
    let mut clients = prepared
        .shards
        .iter()
        .enumerate()
        .map(|(id, shard)| ClientState::new(id, shard.clone(), global.clone()))
        .collect::<Result<Vec<_>>>()?;

    let client_cfg = cfg.effective_client();
    let compute_rho = cfg.strategy.needs_rho() || cfg.curvature_always;
    let mut rho = vec![0.0; k];
    let mut records = Vec::with_capacity(cfg.rounds);

    for round in 1..=cfg.rounds {
        let r = round as u64;
        let mut timings = PhaseTimings::default();

        // Broadcast and local training.
        let started = Instant::now();
        for (c, &rk) in clients.iter_mut().zip(&rho) {
            c.receive_global(&global);
            c.set_rho(rk)?;
        }
        let stats: Vec<TrainStats> = clients
            .par_iter_mut()
            .map(|c| {
                let mut trng = rng::substream(cfg.seed, &[stream::TRAIN, r, c.id as u64]);
                let mut s = local_train(c, &client_cfg, &mut trng)?;
                c.model.round_to_f32();
                if !c.model.is_finite() {
                    c.model = global.clone();
                    s.diverged = true;
                }
                Ok(s)
            })
            .collect::<Result<_>>()?;
        timings.train = started.elapsed().as_secs_f64();

        // The attack sees exactly the uploaded, pre-aggregation models.
        let started = Instant::now();
        let models: Vec<ModelParams> = clients.iter().map(|c| c.model.clone()).collect();
        let tie = match cfg.attack.tie_break {
            TieBreakMode::LowestId => TieBreak::LowestId,
            TieBreakMode::Random => {
                TieBreak::Random(rng::derive_seed(cfg.seed, &[stream::ATTACK, r]))
            }
        };
        let sia = sia_round(&models, &targets, tie)?;
        let sia_models_sha256 =
            model_hash(&models.iter().collect::<Vec<_>>(), cfg.seed, round, true)?;
        timings.attack = started.elapsed().as_secs_f64();

        let started = Instant::now();
        let (curv, new_rho) = if compute_rho {
            let curv: Vec<Option<ClientCurvature>> = clients
                .par_iter()
                .map(|c| {
                    let mut crng = rng::substream(cfg.seed, &[stream::CURVATURE, r, c.id as u64]);
                    match estimate_client_curvature(&c.model, c.shard(), &cfg.curvature, &mut crng)
                    {
                        Ok(v) => Ok(Some(v)),
                        Err(e) if is_numeric(&e) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<_>>()?;
            let ranks = match cfg.hooks.equal_rho {
                Some(v) => vec![v; k],
                None => ranks_from_curvature(&curv)?,
            };
            (curv, Some(ranks))
        } else {
            (vec![None; k], cfg.hooks.equal_rho.map(|v| vec![v; k]))
        };
        timings.curvature = started.elapsed().as_secs_f64();

        let started = Instant::now();
        let agg_rho = new_rho.clone().unwrap_or_else(|| vec![0.0; k]);
        let AggregationOutcome {
            model: mut next_global,
            weights,
            distances,
            objective,
            fallback,
        } = aggregate(
            cfg.strategy.rule(),
            &global,
            &models,
            &sizes,
            &agg_rho,
            cfg.hooks.force_uniform_weights,
        )?;
        next_global.round_to_f32();
        if !next_global.is_finite() {
            return Err(Error::NonFinite("aggregated global model"));
        }
        timings.aggregation = started.elapsed().as_secs_f64();
        global = next_global;

        let train_acc = accuracy(&global, &prepared.train)?;
        let test_acc = accuracy(&global, &prepared.test)?;
        let metrics =
            MetricsRow::compute(round, &sia.accuracy, &sia.target_loss, train_acc, test_acc)?;

        if let Some(dir) = checkpoint_dir {
            let round_dir = dir.join(format!("round_{round:04}"));
            std::fs::create_dir_all(&round_dir).map_err(|e| Error::io(&round_dir, e))?;
            for (id, m) in models.iter().enumerate() {
                let path = round_dir.join(format!("client_{id:03}.ckpt"));
                checkpoint::save(&path, m, &client_lineage(cfg.seed, round, Some(id)))?;
            }
            let path = round_dir.join("global.ckpt");
            checkpoint::save(&path, &global, &client_lineage(cfg.seed, round, None))?;
        }

        let client_records = (0..k)
            .map(|i| ClientRoundRecord {
                client: i,
                shard_size: sizes[i],
                rho_used: rho[i],
                lambda_max: curv[i].map(|c| c.lambda_max),
                trace: curv[i].map(|c| c.trace),
                rho: new_rho.as_ref().map(|v| v[i]),
                p: distances.as_ref().map(|d| d.p[i]),
                weight: weights.as_slice()[i],
                sia_acc: sia.accuracy[i],
                target_loss: sia.target_loss[i],
                train_loss: stats[i].epoch_losses.last().copied().unwrap_or(f64::NAN),
                final_penalty: stats[i].final_penalty,
                steps: stats[i].steps,
                diverged: stats[i].diverged,
            })
            .collect();
        records.push(RoundRecord {
            round,
            clients: client_records,
            metrics,
            objective,
            pca_components: distances.as_ref().map(|d| d.components),
            ala_fallback: fallback,
            attribution: sia.attribution,
            sia_models_sha256,
            global_sha256: model_hash(&[&global], cfg.seed, round, false)?,
            timings,
        });
        rho = new_rho.unwrap_or_else(|| vec![0.0; k]);
    }

    let summary = summarize(cfg, &records)?;
    Ok(RunOutput {
        config: cfg.clone(),
        records,
        summary,
        partition: prepared.partition,
        targets,
        global,
        warnings: cfg.warnings(),
    })
}

pub(crate) fn summarize(cfg: &ExperimentConfig, records: &[RoundRecord]) -> Result<RunSummary> {
    let rows: Vec<MetricsRow> = records.iter().map(|r| r.metrics.clone()).collect();
    let diverged = records
        .iter()
        .filter(|r| r.diverged_clients() > 0)
        .map(|r| r.round)
        .collect();
    Ok(RunSummary {
        strategy: cfg.strategy.to_string(),
        seed: cfg.seed,
        clients: cfg.clients,
        metrics: Summary::from_rows(&rows, diverged, cfg.convergence_delta)?,
    })
}

/// Run and write the full report (plus checkpoints when enabled) to
/// `out_dir`.
pub fn run_to_dir(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutput> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt: Option<PathBuf> = cfg.checkpoints.then(|| out_dir.join("checkpoints"));
    if let Some(dir) = &ckpt {
        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let output = run_experiment(cfg, ckpt.as_deref())?;
    super::report::emit_report(&output, out_dir)?;
    Ok(output)
}
