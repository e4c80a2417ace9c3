//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and falls
//! back to its default; unknown or repeated keys are errors.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `seed` | 0 | base seed for every random stream |
//! | `rounds` | 20 | communication rounds |
//! | `clients` | 10 | number of clients |
//! | `strategy` | `fedavg` | see [`Strategy`] |
//! | `beta` | 0.1 | penalty impact factor (client-side strategies only) |
//! | `local_epochs` | 1 | epochs per round |
//! | `batch_size` | 64 | minibatch size |
//! | `lr` | 0.001 | learning rate |
//! | `optimizer` | `adam` | `adam` or `sgd` |
//! | `power_iters` | 5 | power iterations per penalty estimate |
//! | `data.source` | `synthetic` | `synthetic` or `csv` |
//! | `data.csv_dir` | | directory of `client_XXX.csv` files (+ optional `test.csv`) |
//! | `data.classes` | 10 | classes (`csv`: 0 infers from labels) |
//! | `data.dim` | 20 | feature width (synthetic) |
//! | `data.n_per_class` | 300 | rows per class (synthetic) |
//! | `data.separation` | 2.0 | distance of class centres from the origin |
//! | `data.test_fraction` | 0.3 | held-out share |
//! | `data.partition` | `dirichlet` | `dirichlet` or `iid` |
//! | `data.alpha` | 0.5 | Dirichlet concentration |
//! | `model.hidden` | 32 | comma-separated hidden widths, may be empty |
//! | `model.activation` | `relu` | `relu` or `tanh` |
//! | `attack.n_per_client` | 50 | target records per client |
//! | `attack.tie_break` | `lowest_id` | `lowest_id` or `random` |
//! | `curvature.power_iters` | 20 | Hessian power iterations |
//! | `curvature.tol` | 1e-4 | eigenvalue convergence tolerance |
//! | `curvature.probes` | 100 | Hutchinson probes |
//! | `curvature.subsample` | 256 | rows used for curvature (0 = whole shard) |
//! | `curvature.always` | false | compute ranks even when the strategy ignores them |
//! | `metrics.convergence_delta` | 0.01 | plateau tolerance for the convergence round |
//! | `checkpoints` | false | write per-round client and global checkpoints |
//! | `workers` | 1 | worker threads (0 = all cores) |
//! | `hooks.force_uniform_weights` | false | aggregate with `1/K` whatever the rule |
//! | `hooks.equal_rho` | | replace every rank by this value |

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::client::{ClientConfig, Optimizer};
use crate::curvature::CurvatureConfig;
use crate::nn::Activation;
use crate::server::AggregationRule;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FedAvg,
    FinpClientOnly,
    FinpServerPca,
    FinpServerAla,
    FinpFullPca,
    FinpFullAla,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::FedAvg,
        Strategy::FinpClientOnly,
        Strategy::FinpServerPca,
        Strategy::FinpServerAla,
        Strategy::FinpFullPca,
        Strategy::FinpFullAla,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FinpClientOnly => "finp_client_only",
            Strategy::FinpServerPca => "finp_server_pca",
            Strategy::FinpServerAla => "finp_server_ala",
            Strategy::FinpFullPca => "finp_full_pca",
            Strategy::FinpFullAla => "finp_full_ala",
        }
    }

    /// Clients train with the rank-gated penalty.
    pub fn client_penalty(self) -> bool {
        matches!(
            self,
            Strategy::FinpClientOnly | Strategy::FinpFullPca | Strategy::FinpFullAla
        )
    }

    pub fn rule(self) -> AggregationRule {
        match self {
            Strategy::FedAvg | Strategy::FinpClientOnly => AggregationRule::FedAvg,
            Strategy::FinpServerPca | Strategy::FinpFullPca => AggregationRule::Pca,
            Strategy::FinpServerAla | Strategy::FinpFullAla => AggregationRule::Ala,
        }
    }

    /// Overfitting ranks influence training or aggregation.
    pub fn needs_rho(self) -> bool {
        self.client_penalty() || self.rule() == AggregationRule::Ala
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Csv(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartitionMode {
    Dirichlet,
    Iid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub source: DataSource,
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub separation: f64,
    pub test_fraction: f64,
    pub partition: PartitionMode,
    pub alpha: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            source: DataSource::Synthetic,
            classes: 10,
            dim: 20,
            n_per_class: 300,
            separation: 2.0,
            test_fraction: 0.3,
            partition: PartitionMode::Dirichlet,
            alpha: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            hidden: vec![32],
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TieBreakMode {
    #[default]
    LowestId,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackSpec {
    pub n_per_client: usize,
    pub tie_break: TieBreakMode,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            n_per_client: 50,
            tie_break: TieBreakMode::LowestId,
        }
    }
}

/// Test hooks that pin otherwise adaptive quantities.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Hooks {
    pub force_uniform_weights: bool,
    pub equal_rho: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub strategy: Strategy,
    pub client: ClientConfig,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub attack: AttackSpec,
    pub curvature: CurvatureConfig,
    pub curvature_always: bool,
    pub convergence_delta: f64,
    pub checkpoints: bool,
    pub workers: usize,
    pub hooks: Hooks,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            rounds: 20,
            clients: 10,
            strategy: Strategy::FedAvg,
            client: ClientConfig {
                beta: 0.1,
                ..ClientConfig::default()
            },
            data: DataSpec::default(),
            model: ModelSpec::default(),
            attack: AttackSpec::default(),
            curvature: CurvatureConfig::default(),
            curvature_always: false,
            convergence_delta: 0.01,
            checkpoints: false,
            workers: 1,
            hooks: Hooks::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "line {line}: {key} expects true or false, got {value:?}"
        ))),
    }
}

fn parse_list(key: &str, value: &str, line: usize) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_value(key, v.trim(), line))
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = HashSet::new();
        for (index, raw) in text.lines().enumerate() {
            let line = index + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key {key}")));
            }
            cfg.set(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value, line)?,
            "rounds" => self.rounds = parse_value(key, value, line)?,
            "clients" => self.clients = parse_value(key, value, line)?,
            "strategy" => self.strategy = value.parse()?,
            "beta" => self.client.beta = parse_value(key, value, line)?,
            "local_epochs" => self.client.local_epochs = parse_value(key, value, line)?,
            "batch_size" => self.client.batch_size = parse_value(key, value, line)?,
            "lr" => self.client.lr = parse_value(key, value, line)?,
            "optimizer" => {
                self.client.optimizer = value
                    .parse::<Optimizer>()
                    .map_err(|e| Error::Config(format!("line {line}: {e}")))?
            }
            "power_iters" => self.client.power_iters = parse_value(key, value, line)?,
            "data.source" => {
                self.data.source = match value {
                    "synthetic" => DataSource::Synthetic,
                    "csv" => DataSource::Csv(match &self.data.source {
                        DataSource::Csv(p) => p.clone(),
                        DataSource::Synthetic => PathBuf::new(),
                    }),
                    other => {
                        return Err(Error::Config(format!(
                            "line {line}: unknown data.source {other:?}"
                        )))
                    }
                }
            }
            "data.csv_dir" => self.data.source = DataSource::Csv(PathBuf::from(value)),
            "data.classes" => self.data.classes = parse_value(key, value, line)?,
            "data.dim" => self.data.dim = parse_value(key, value, line)?,
            "data.n_per_class" => self.data.n_per_class = parse_value(key, value, line)?,
            "data.separation" => self.data.separation = parse_value(key, value, line)?,
            "data.test_fraction" => self.data.test_fraction = parse_value(key, value, line)?,
            "data.partition" => {
                self.data.partition = match value {
                    "dirichlet" => PartitionMode::Dirichlet,
                    "iid" => PartitionMode::Iid,
                    other => {
                        return Err(Error::Config(format!(
                            "line {line}: unknown data.partition {other:?}"
                        )))
                    }
                }
            }
            "data.alpha" => self.data.alpha = parse_value(key, value, line)?,
            "model.hidden" => self.model.hidden = parse_list(key, value, line)?,
            "model.activation" => {
                self.model.activation = value
                    .parse::<Activation>()
                    .map_err(|e| Error::Config(format!("line {line}: {e}")))?
            }
            "attack.n_per_client" => self.attack.n_per_client = parse_value(key, value, line)?,
            "attack.tie_break" => {
                self.attack.tie_break = match value {
                    "lowest_id" => TieBreakMode::LowestId,
                    "random" => TieBreakMode::Random,
                    other => {
                        return Err(Error::Config(format!(
                            "line {line}: unknown attack.tie_break {other:?}"
                        )))
                    }
                }
            }
            "curvature.power_iters" => self.curvature.power_iters = parse_value(key, value, line)?,
            "curvature.tol" => self.curvature.tol = parse_value(key, value, line)?,
            "curvature.probes" => self.curvature.probes = parse_value(key, value, line)?,
            "curvature.subsample" => self.curvature.subsample = parse_value(key, value, line)?,
            "curvature.always" => self.curvature_always = parse_bool(key, value, line)?,
            "metrics.convergence_delta" => self.convergence_delta = parse_value(key, value, line)?,
            "checkpoints" => self.checkpoints = parse_bool(key, value, line)?,
            "workers" => self.workers = parse_value(key, value, line)?,
            "hooks.force_uniform_weights" => {
                self.hooks.force_uniform_weights = parse_bool(key, value, line)?
            }
            "hooks.equal_rho" => self.hooks.equal_rho = Some(parse_value(key, value, line)?),
            other => return Err(Error::Config(format!("line {line}: unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.rounds == 0 {
            return fail("rounds must be >= 1");
        }
        if self.clients < 2 {
            return fail("clients must be >= 2");
        }
        self.client
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if let DataSource::Csv(dir) = &self.data.source {
            if dir.as_os_str().is_empty() {
                return fail("data.source = csv requires data.csv_dir");
            }
        } else {
            if self.data.classes < 2 || self.data.dim == 0 || self.data.n_per_class == 0 {
                return fail("synthetic data needs classes >= 2, dim >= 1 and n_per_class >= 1");
            }
            if !(self.data.separation > 0.0 && self.data.separation.is_finite()) {
                return fail("data.separation must be positive");
            }
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return fail("data.test_fraction must lie in (0, 1)");
        }
        if !(self.data.alpha > 0.0 && self.data.alpha.is_finite()) {
            return fail("data.alpha must be positive");
        }
        if self.model.hidden.contains(&0) {
            return fail("model.hidden widths must be >= 1");
        }
        if self.attack.n_per_client == 0 {
            return fail("attack.n_per_client must be >= 1");
        }
        if self.curvature.power_iters == 0 || self.curvature.probes == 0 {
            return fail("curvature.power_iters and curvature.probes must be >= 1");
        }
        if self.curvature.tol.is_nan() || self.curvature.tol < 0.0 {
            return fail("curvature.tol must be >= 0");
        }
        if self.convergence_delta.is_nan() || self.convergence_delta <= 0.0 {
            return fail("metrics.convergence_delta must be positive");
        }
        if let Some(r) = self.hooks.equal_rho {
            if !(0.0..=1.0).contains(&r) {
                return fail("hooks.equal_rho must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Settings that are accepted but have no effect under this strategy.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.strategy.client_penalty() && self.client.beta != 0.0 {
            out.push(format!(
                "beta = {} is ignored by strategy {}",
                self.client.beta, self.strategy
            ));
        }
        if self.data.partition == PartitionMode::Iid && self.data.alpha != DataSpec::default().alpha
        {
            out.push("data.alpha is ignored with data.partition = iid".into());
        }
        out
    }

    /// Client settings after strategy gating.
    pub fn effective_client(&self) -> ClientConfig {
        ClientConfig {
            beta: if self.strategy.client_penalty() {
                self.client.beta
            } else {
                0.0
            },
            ..self.client.clone()
        }
    }

    pub fn with_strategy(&self, strategy: Strategy) -> Self {
        ExperimentConfig {
            strategy,
            ..self.clone()
        }
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("rounds", self.rounds.to_string());
        put("clients", self.clients.to_string());
        put("strategy", self.strategy.to_string());
        put("beta", format!("{:?}", self.client.beta));
        put("local_epochs", self.client.local_epochs.to_string());
        put("batch_size", self.client.batch_size.to_string());
        put("lr", format!("{:?}", self.client.lr));
        put("optimizer", self.client.optimizer.to_string());
        put("power_iters", self.client.power_iters.to_string());
        match &self.data.source {
            DataSource::Synthetic => put("data.source", "synthetic".into()),
            DataSource::Csv(dir) => {
                put("data.source", "csv".into());
                put("data.csv_dir", dir.display().to_string());
            }
        }
        put("data.classes", self.data.classes.to_string());
        put("data.dim", self.data.dim.to_string());
        put("data.n_per_class", self.data.n_per_class.to_string());
        put("data.separation", format!("{:?}", self.data.separation));
        put(
            "data.test_fraction",
            format!("{:?}", self.data.test_fraction),
        );
        put(
            "data.partition",
            match self.data.partition {
                PartitionMode::Dirichlet => "dirichlet",
                PartitionMode::Iid => "iid",
            }
            .into(),
        );
        put("data.alpha", format!("{:?}", self.data.alpha));
        put(
            "model.hidden",
            self.model
                .hidden
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        put("model.activation", self.model.activation.to_string());
        put("attack.n_per_client", self.attack.n_per_client.to_string());
        put(
            "attack.tie_break",
            match self.attack.tie_break {
                TieBreakMode::LowestId => "lowest_id",
                TieBreakMode::Random => "random",
            }
            .into(),
        );
        put(
            "curvature.power_iters",
            self.curvature.power_iters.to_string(),
        );
        put("curvature.tol", format!("{:?}", self.curvature.tol));
        put("curvature.probes", self.curvature.probes.to_string());
        put("curvature.subsample", self.curvature.subsample.to_string());
        put("curvature.always", self.curvature_always.to_string());
        put(
            "metrics.convergence_delta",
            format!("{:?}", self.convergence_delta),
        );
        put("checkpoints", self.checkpoints.to_string());
        put("workers", self.workers.to_string());
        put(
            "hooks.force_uniform_weights",
            self.hooks.force_uniform_weights.to_string(),
        );
        if let Some(r) = self.hooks.equal_rho {
            put("hooks.equal_rho", format!("{r:?}"));
        }
        s
    }
}
