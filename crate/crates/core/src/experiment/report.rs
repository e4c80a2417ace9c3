//! Output files of a run.
//!
//! * `config.txt`: canonical echo of the configuration
//! * `partition.json`: client id -> training row indices (synthetic data)
//! * `targets.json`: attack target manifest
//! * `rounds.csv`: one row per round; columns `round, mean_sia, max_sia,
//!   cov_sia, fi_sia, cov_loss, fi_loss, eod, train_acc, test_acc,
//!   objective, pca_components, ala_fallback, diverged_clients,
//!   sia_models_sha256, global_sha256`, then `w_XXX`, `p_XXX`, `rho_XXX` per
//!   client
//! * `clients.csv`: one row per (round, client)
//! * `sia.csv`, `attribution.csv`: attack results
//! * `timings.csv`: wall-clock seconds per phase (not deterministic)
//! * `summary.json`: run summary
//!
//! Undefined values are written as `NA`. Numbers use the shortest
//! representation that parses back to the same `f64`.

use std::path::Path;

use csv::{ReaderBuilder, StringRecord, Writer};

use super::config::ExperimentConfig;
use super::runner::{summarize, RunOutput, RunSummary};
use crate::attack::SiaRoundResult;
use crate::metrics::{MetricsRow, Summary};
use crate::{Error, Result};

pub const NA: &str = "NA";

fn num(x: f64) -> String {
    format!("{x:?}")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| NA.to_string(), num)
}

fn writer(path: &Path) -> Result<Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(Writer::from_writer(file))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn summary_json(summary: &RunSummary) -> Result<String> {
    let mut s = serde_json::to_string_pretty(summary)?;
    s.push('\n');
    Ok(s)
}

/// Write `sia.csv` and `attribution.csv` for `(round, result)` pairs.
pub fn write_sia_csvs(results: &[(usize, SiaRoundResult)], out_dir: &Path) -> Result<()> {
    let mut sia = writer(&out_dir.join("sia.csv"))?;
    sia.write_record(["round", "client", "sia_acc", "target_loss"])?;
    let mut attr = writer(&out_dir.join("attribution.csv"))?;
    attr.write_record(["round", "true_source", "predicted_source", "count"])?;
    for (round, r) in results {
        for (k, (acc, loss)) in r.accuracy.iter().zip(&r.target_loss).enumerate() {
            sia.write_record([round.to_string(), k.to_string(), num(*acc), num(*loss)])?;
        }
        for (t, row) in r.attribution.iter().enumerate() {
            for (p, count) in row.iter().enumerate() {
                attr.write_record([
                    round.to_string(),
                    t.to_string(),
                    p.to_string(),
                    count.to_string(),
                ])?;
            }
        }
    }
    sia.flush()
        .map_err(|e| Error::io(out_dir.join("sia.csv"), e))?;
    attr.flush()
        .map_err(|e| Error::io(out_dir.join("attribution.csv"), e))?;
    Ok(())
}

/// Write every report file for `output` into `out_dir`, creating it.
pub fn emit_report(output: &RunOutput, out_dir: &Path) -> Result<()> {
    if output.records.is_empty() {
        return Err(Error::InvalidArgument("nothing to report".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let k = output.config.clients;

    write_text(
        &out_dir.join("config.txt"),
        &output.config.to_config_string(),
    )?;
    if let Some(p) = &output.partition {
        write_text(
            &out_dir.join("partition.json"),
            &(p.to_manifest_json()? + "\n"),
        )?;
    }
    write_text(
        &out_dir.join("targets.json"),
        &(output.targets.to_json()? + "\n"),
    )?;

    let mut rounds = writer(&out_dir.join("rounds.csv"))?;
    let mut header: Vec<String> = [
        "round",
        "mean_sia",
        "max_sia",
        "cov_sia",
        "fi_sia",
        "cov_loss",
        "fi_loss",
        "eod",
        "train_acc",
        "test_acc",
        "objective",
        "pca_components",
        "ala_fallback",
        "diverged_clients",
        "sia_models_sha256",
        "global_sha256",
    ]
    .map(String::from)
    .to_vec();
    for prefix in ["w", "p", "rho"] {
        header.extend((0..k).map(|i| format!("{prefix}_{i:03}")));
    }
    rounds.write_record(&header)?;
    for r in &output.records {
        let m = &r.metrics;
        let mut row = vec![
            r.round.to_string(),
            num(m.mean_sia),
            num(m.max_sia),
            opt(m.cov_sia),
            opt(m.fi_sia),
            opt(m.cov_loss),
            opt(m.fi_loss),
            num(m.eod),
            num(m.train_acc),
            num(m.test_acc),
            opt(r.objective),
            r.pca_components
                .map_or_else(|| NA.to_string(), |c| c.to_string()),
            r.ala_fallback.to_string(),
            r.diverged_clients().to_string(),
            r.sia_models_sha256.clone(),
            r.global_sha256.clone(),
        ];
        row.extend(r.clients.iter().map(|c| num(c.weight)));
        row.extend(r.clients.iter().map(|c| opt(c.p)));
        row.extend(r.clients.iter().map(|c| opt(c.rho)));
        rounds.write_record(&row)?;
    }
    rounds
        .flush()
        .map_err(|e| Error::io(out_dir.join("rounds.csv"), e))?;

    let mut clients = writer(&out_dir.join("clients.csv"))?;
    clients.write_record([
        "round",
        "client",
        "shard_size",
        "rho_used",
        "lambda_max",
        "trace",
        "rho",
        "p",
        "weight",
        "sia_acc",
        "target_loss",
        "train_loss",
        "final_penalty",
        "steps",
        "diverged",
    ])?;
    for r in &output.records {
        for c in &r.clients {
            clients.write_record([
                r.round.to_string(),
                c.client.to_string(),
                c.shard_size.to_string(),
                num(c.rho_used),
                opt(c.lambda_max),
                opt(c.trace),
                opt(c.rho),
                opt(c.p),
                num(c.weight),
                num(c.sia_acc),
                num(c.target_loss),
                num(c.train_loss),
                num(c.final_penalty),
                c.steps.to_string(),
                c.diverged.to_string(),
            ])?;
        }
    }
    clients
        .flush()
        .map_err(|e| Error::io(out_dir.join("clients.csv"), e))?;

    let sia: Vec<(usize, SiaRoundResult)> =
        output.records.iter().map(|r| (r.round, r.sia())).collect();
    write_sia_csvs(&sia, out_dir)?;

    let mut timings = writer(&out_dir.join("timings.csv"))?;
    timings.write_record([
        "round",
        "train_s",
        "attack_s",
        "curvature_s",
        "aggregation_s",
    ])?;
    for r in &output.records {
        let t = r.timings;
        timings.write_record([
            r.round.to_string(),
            num(t.train),
            num(t.attack),
            num(t.curvature),
            num(t.aggregation),
        ])?;
    }
    timings
        .flush()
        .map_err(|e| Error::io(out_dir.join("timings.csv"), e))?;

    write_text(
        &out_dir.join("summary.json"),
        &summary_json(&output.summary)?,
    )
}

fn field<'a>(
    record: &'a StringRecord,
    header: &StringRecord,
    name: &str,
    path: &Path,
    line: usize,
) -> Result<&'a str> {
    let idx = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("missing column {name}"),
        })?;
    record.get(idx).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("row has no {name} value"),
    })
}

fn parse_f64(text: &str, path: &Path, line: usize) -> Result<f64> {
    text.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("{text:?} is not a number"),
    })
}

fn parse_opt(text: &str, path: &Path, line: usize) -> Result<Option<f64>> {
    if text == NA {
        Ok(None)
    } else {
        parse_f64(text, path, line).map(Some)
    }
}

/// Rebuild the summary of a finished run from its `config.txt` and
/// `rounds.csv`, rewrite `summary.json`, and return it.
pub fn render_report(dir: &Path) -> Result<RunSummary> {
    let cfg = ExperimentConfig::load(&dir.join("config.txt"))?;
    let path = dir.join("rounds.csv");
    let mut reader = ReaderBuilder::new()
        .from_path(&path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(&path, io),
            other => Error::Parse {
                path: path.clone(),
                line: 1,
                msg: format!("{other:?}"),
            },
        })?;
    let header = reader.headers()?.clone();
    let mut rows = Vec::new();
    let mut diverged = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let get = |name: &str| field(&record, &header, name, &path, line);
        let round: usize = get("round")?.parse().map_err(|_| Error::Parse {
            path: path.clone(),
            line,
            msg: "round is not an integer".into(),
        })?;
        let diverged_clients: usize =
            get("diverged_clients")?.parse().map_err(|_| Error::Parse {
                path: path.clone(),
                line,
                msg: "diverged_clients is not an integer".into(),
            })?;
        if diverged_clients > 0 {
            diverged.push(round);
        }
        rows.push(MetricsRow {
            round,
            cov_sia: parse_opt(get("cov_sia")?, &path, line)?,
            fi_sia: parse_opt(get("fi_sia")?, &path, line)?,
            cov_loss: parse_opt(get("cov_loss")?, &path, line)?,
            fi_loss: parse_opt(get("fi_loss")?, &path, line)?,
            eod: parse_f64(get("eod")?, &path, line)?,
            mean_sia: parse_f64(get("mean_sia")?, &path, line)?,
            max_sia: parse_f64(get("max_sia")?, &path, line)?,
            train_acc: parse_f64(get("train_acc")?, &path, line)?,
            test_acc: parse_f64(get("test_acc")?, &path, line)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path,
            line: 1,
            msg: "no rounds recorded".into(),
        });
    }
    let summary = RunSummary {
        strategy: cfg.strategy.to_string(),
        seed: cfg.seed,
        clients: cfg.clients,
        metrics: Summary::from_rows(&rows, diverged, cfg.convergence_delta)?,
    };
    write_text(&dir.join("summary.json"), &summary_json(&summary)?)?;
    Ok(summary)
}

/// Summary of in-memory records, as `summary.json` would hold it.
pub fn summary_of(output: &RunOutput) -> Result<RunSummary> {
    summarize(&output.config, &output.records)
}
