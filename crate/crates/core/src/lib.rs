//! Deterministic federated-learning simulator for studying how evenly
//! source-inference risk is spread across clients.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`] – a small dense network with a hand-written reverse pass,
//!   input-Jacobian products, exact Hessian-vector products,
//!   optimizers and a binary checkpoint format.
//! * [`curvature`] – top Hessian eigenvalue, Hutchinson trace and the
//!   relative overfitting rank of every client.
//! * [`client`] – local training with the rank-gated Jacobian penalty.
//! * [`server`] – FedAvg, PCA-distance weighting and lightweight
//!   rank-based aggregation.
//! * [`attack`] – the source inference attack harness.
//! * [`metrics`] – CoV / fairness index / EOD and friends.
//! * [`data`] – synthetic data, Dirichlet partitioning and CSV I/O.
//! * [`experiment`] – the round loop, config, reporting and replay.

pub mod attack;
pub mod client;
pub mod curvature;
pub mod data;
mod error;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod server;

pub use error::{Error, Result};
