use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use finp_core::data::{synth_gaussian_mixture, write_csv};
use finp_core::experiment::{
    render_report, replay_attack, run_experiment, run_to_dir, ExperimentConfig, Strategy,
    TieBreakMode,
};
use finp_core::{rng, Error};
use sha2::{Digest, Sha256};

fn small(strategy: &str, extra: &str) -> ExperimentConfig {
    let text = format!(
        "seed = 7\nrounds = 2\nclients = 4\nstrategy = {strategy}\nlocal_epochs = 2\nlr = 0.01\n\
         data.classes = 3\ndata.dim = 5\ndata.n_per_class = 60\nmodel.hidden = 8\n\
         attack.n_per_client = 5\ncurvature.probes = 5\ncurvature.power_iters = 5\n\
         curvature.subsample = 32\n{extra}"
    );
    ExperimentConfig::parse(&text).unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small("finp_full_pca", "checkpoints = true\n");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cfg.workers = 1;
    run_to_dir(&cfg, &a).unwrap();
    cfg.workers = 4;
    run_to_dir(&cfg, &b).unwrap();
    let (mut fa, mut fb) = (files(&a), files(&b));
    for f in [&mut fa, &mut fb] {
        assert!(f.remove(Path::new("timings.csv")).is_some());
        // The echoed config holds the worker count.
        assert!(f.remove(Path::new("config.txt")).is_some());
    }
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        assert!(bytes == &fb[name], "{} differs", name.display());
    }
}

#[test]
fn report_files_are_written() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_to_dir(&small("fedavg", ""), tmp.path()).unwrap();
    for name in [
        "config.txt",
        "partition.json",
        "targets.json",
        "rounds.csv",
        "clients.csv",
        "sia.csv",
        "attribution.csv",
        "timings.csv",
        "summary.json",
    ] {
        assert!(tmp.path().join(name).is_file(), "{name}");
    }
    let rounds = std::fs::read_to_string(tmp.path().join("rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 3);
    assert!(rounds.starts_with("round,mean_sia,max_sia,cov_sia,fi_sia,cov_loss,fi_loss,eod,"));
    assert!(rounds.lines().next().unwrap().ends_with("rho_003"));
    assert!(!tmp.path().join("checkpoints").exists());
    let echoed = ExperimentConfig::load(&tmp.path().join("config.txt")).unwrap();
    assert_eq!(echoed, out.config);
}

#[test]
fn fedavg_weights_follow_shard_sizes() {
    let out = run_experiment(&small("fedavg", ""), None).unwrap();
    for record in &out.records {
        let total: usize = record.clients.iter().map(|c| c.shard_size).sum();
        for c in &record.clients {
            let expect = c.shard_size as f64 / total as f64;
            assert!((c.weight - expect).abs() < 1e-12);
            assert_eq!(c.rho_used, 0.0);
            assert!(c.rho.is_none() && c.lambda_max.is_none() && c.p.is_none());
        }
        assert!(record.objective.is_none());
    }
}

#[test]
fn ala_with_equal_ranks_is_uniform() {
    let out = run_experiment(&small("finp_server_ala", "hooks.equal_rho = 0.25\n"), None).unwrap();
    for record in &out.records {
        for c in &record.clients {
            assert!((c.weight - 0.25).abs() < 1e-12);
            assert_eq!(c.rho, Some(0.25));
        }
    }
}

#[test]
fn full_strategy_feeds_ranks_back_a_round_later() {
    let mut cfg = small("finp_full_ala", "");
    cfg.rounds = 3;
    let out = run_experiment(&cfg, None).unwrap();
    for c in &out.records[0].clients {
        assert_eq!(c.rho_used, 0.0);
    }
    for pair in out.records.windows(2) {
        for (prev, next) in pair[0].clients.iter().zip(&pair[1].clients) {
            assert_eq!(Some(next.rho_used), prev.rho);
        }
    }
    for record in &out.records {
        let sum: f64 = record.clients.iter().map(|c| c.weight).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for c in &record.clients {
            let rho = c.rho.unwrap();
            assert!((0.0..=1.0).contains(&rho));
        }
    }
}

#[test]
fn pca_records_objective_and_components() {
    let out = run_experiment(&small("finp_server_pca", ""), None).unwrap();
    for record in &out.records {
        assert!(record.objective.unwrap() >= 0.0);
        let m = record.pca_components.unwrap();
        assert!((1..=3).contains(&m));
        assert!(record.clients.iter().all(|c| c.p.unwrap() >= 0.0));
    }
}

#[test]
fn replay_reproduces_in_run_attack() {
    for mode in ["lowest_id", "random"] {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small(
            "finp_full_pca",
            &format!("checkpoints = true\nattack.tie_break = {mode}\n"),
        );
        let out = run_to_dir(&cfg, tmp.path()).unwrap();
        let tie = if mode == "random" {
            TieBreakMode::Random
        } else {
            TieBreakMode::LowestId
        };
        let replayed = replay_attack(
            &tmp.path().join("checkpoints"),
            &tmp.path().join("targets.json"),
            tie,
        )
        .unwrap();
        assert_eq!(replayed.len(), out.records.len());
        for ((round, result), record) in replayed.iter().zip(&out.records) {
            assert_eq!(*round, record.round);
            assert_eq!(result, &record.sia());
        }

        let again = tmp.path().join("replay");
        std::fs::create_dir_all(&again).unwrap();
        finp_core::experiment::write_sia_csvs(&replayed, &again).unwrap();
        for name in ["sia.csv", "attribution.csv"] {
            assert_eq!(
                std::fs::read(tmp.path().join(name)).unwrap(),
                std::fs::read(again.join(name)).unwrap(),
                "{name}"
            );
        }
    }
}

#[test]
fn recorded_hashes_match_checkpoint_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small("fedavg", "checkpoints = true\n");
    let out = run_to_dir(&cfg, tmp.path()).unwrap();
    for record in &out.records {
        let dir = tmp
            .path()
            .join(format!("checkpoints/round_{:04}", record.round));
        let mut h = Sha256::new();
        for k in 0..cfg.clients {
            h.update(std::fs::read(dir.join(format!("client_{k:03}.ckpt"))).unwrap());
        }
        assert_eq!(hex::encode(h.finalize()), record.sia_models_sha256);
        let global = Sha256::digest(std::fs::read(dir.join("global.ckpt")).unwrap());
        assert_eq!(hex::encode(global), record.global_sha256);
    }
}

#[test]
fn replay_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small("fedavg", "checkpoints = true\n");
    run_to_dir(&cfg, tmp.path()).unwrap();
    let targets = tmp.path().join("targets.json");

    let empty = tempfile::tempdir().unwrap();
    let err = replay_attack(empty.path(), &targets, TieBreakMode::LowestId).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }), "{err}");

    let ckpts = tmp.path().join("checkpoints");
    std::fs::remove_file(ckpts.join("round_0002/client_001.ckpt")).unwrap();
    let err = replay_attack(&ckpts, &targets, TieBreakMode::LowestId).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }), "{err}");

    std::fs::copy(
        ckpts.join("round_0001/client_000.ckpt"),
        ckpts.join("round_0002/client_001.ckpt"),
    )
    .unwrap();
    let err = replay_attack(&ckpts, &targets, TieBreakMode::LowestId).unwrap_err();
    assert!(err.to_string().contains("lineage"), "{err}");
}

#[test]
fn render_report_rebuilds_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_to_dir(&small("finp_full_ala", ""), tmp.path()).unwrap();
    let path = tmp.path().join("summary.json");
    let original = std::fs::read(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    let summary = render_report(tmp.path()).unwrap();
    assert_eq!(summary, out.summary);
    assert_eq!(std::fs::read(&path).unwrap(), original);
}

#[test]
fn rerunning_into_a_directory_replaces_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small("fedavg", "checkpoints = true\n");
    cfg.rounds = 3;
    run_to_dir(&cfg, tmp.path()).unwrap();
    cfg.rounds = 2;
    run_to_dir(&cfg, tmp.path()).unwrap();
    assert!(!tmp.path().join("checkpoints/round_0003").exists());
    assert!(tmp.path().join("checkpoints/round_0002").exists());
}

#[test]
fn csv_directory_source() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let mut r = rng::seeded(3);
    for k in 0..4 {
        let ds = synth_gaussian_mixture(3, 5, 20, 2.0, &mut r).unwrap();
        write_csv(&ds, &data.join(format!("client_{k:03}.csv"))).unwrap();
    }
    let cfg = small(
        "finp_full_ala",
        &format!("data.source = csv\ndata.csv_dir = {}\n", data.display()),
    );
    let out = run_to_dir(&cfg, &tmp.path().join("out")).unwrap();
    assert!(out.partition.is_none());
    assert!(!tmp.path().join("out/partition.json").exists());
    // Each 60-row client file keeps 70% for training.
    assert!(out.records[0].clients.iter().all(|c| c.shard_size == 42));

    write_csv(
        &synth_gaussian_mixture(3, 5, 2, 2.0, &mut r).unwrap(),
        &data.join("client_004.csv"),
    )
    .unwrap();
    let err = run_experiment(&cfg, None).err().unwrap();
    assert_eq!(err.category(), "config");
}

#[test]
fn too_many_targets_is_an_error() {
    let mut cfg = small("fedavg", "");
    cfg.attack.n_per_client = 1000;
    let err = run_experiment(&cfg, None).err().unwrap();
    assert_eq!(err.category(), "invalid-input");
}

#[test]
fn strategy_switch_keeps_everything_else() {
    let cfg = small("fedavg", "");
    let other = cfg.with_strategy(Strategy::FinpFullPca);
    assert_eq!(other.strategy, Strategy::FinpFullPca);
    assert_eq!(other.seed, cfg.seed);
    assert_eq!(other.data, cfg.data);
}
