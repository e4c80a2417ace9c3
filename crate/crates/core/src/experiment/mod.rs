//! Round loop, configuration, persistence and offline attack replay.
//!
//! Each round broadcasts the global model, trains clients in parallel with
//! last round's ranks, attacks the uploaded models, estimates curvature and
//! ranks, aggregates, and records metrics. Every random draw comes from a
//! per-purpose substream, so outputs depend only on the config and seed.

pub mod config;
mod replay;
mod report;
mod runner;

pub use config::{
    AttackSpec, DataSource, DataSpec, ExperimentConfig, Hooks, ModelSpec, PartitionMode, Strategy,
    TieBreakMode,
};
pub use replay::replay_attack;
pub use report::{emit_report, render_report, summary_of, write_sia_csvs, NA};
pub use runner::{
    run_experiment, run_to_dir, ClientRoundRecord, PhaseTimings, RoundRecord, RunOutput, RunSummary,
};
