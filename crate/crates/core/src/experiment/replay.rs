use std::path::{Path, PathBuf};

use super::config::TieBreakMode;
use crate::attack::{sia_round, SiaRoundResult, TargetSet, TieBreak};
use crate::nn::checkpoint;
use crate::rng::{self, stream};
use crate::{Error, Result};

fn checkpoint_error(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// `round_NNNN` subdirectories, sorted by round.
fn round_dirs(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut rounds = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(n) = name.to_str().and_then(|s| s.strip_prefix("round_")) else {
            continue;
        };
        if let Ok(round) = n.parse::<usize>() {
            if entry.path().is_dir() {
                rounds.push((round, entry.path()));
            }
        }
    }
    rounds.sort();
    if rounds.is_empty() {
        return Err(checkpoint_error(dir, "no round_NNNN directories"));
    }
    Ok(rounds)
}

/// Re-run the attack on stored client checkpoints against the target
/// manifest, one result per round directory.
pub fn replay_attack(
    checkpoint_dir: &Path,
    manifest: &Path,
    tie_break: TieBreakMode,
) -> Result<Vec<(usize, SiaRoundResult)>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let targets = TargetSet::from_json(&text)?;
    let mut results = Vec::new();
    for (round, dir) in round_dirs(checkpoint_dir)? {
        let mut models = Vec::with_capacity(targets.clients);
        let mut seed = None;
        for client in 0..targets.clients {
            let path = dir.join(format!("client_{client:03}.ckpt"));
            if !path.exists() {
                return Err(checkpoint_error(&path, "missing client checkpoint"));
            }
            let (model, lineage) = checkpoint::load(&path)?;
            if lineage.round.is_some_and(|r| r != round)
                || lineage.client.is_some_and(|c| c != client)
            {
                return Err(checkpoint_error(
                    &path,
                    "lineage does not match its location",
                ));
            }
            seed = Some(lineage.seed);
            models.push(model);
        }
        let tie = match tie_break {
            TieBreakMode::LowestId => TieBreak::LowestId,
            TieBreakMode::Random => {
                let seed = seed.ok_or_else(|| checkpoint_error(&dir, "no client checkpoints"))?;
                TieBreak::Random(rng::derive_seed(seed, &[stream::ATTACK, round as u64]))
            }
        };
        results.push((round, sia_round(&models, &targets, tie)?));
    }
    Ok(results)
}
