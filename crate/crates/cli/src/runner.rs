//! Single-run execution: resolve a config, train, and write the run
//! directory (metrics.csv, confusion.csv, summary.json, manifest.json).

use crate::config::RunSpec;
use anyhow::{Context, Result};
use dtrg_core::data::Provenance;
use dtrg_core::model::{save_checkpoint, EncoderSpec};
use dtrg_core::trainer::{train, EpochMetrics, TrainConfig, TrainOutcome, METRICS_CSV_HEADER};
use dtrg_core::util::sha256_hex;
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Serialize)]
pub struct Summary {
    pub final_top1: f64,
    pub best_top1: f64,
    pub best_epoch: u32,
    pub config_digest: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    status: &'a str,
    config: &'a RunSpec,
    resolved_train_config: &'a TrainConfig,
    encoder: Option<&'a EncoderSpec>,
    dataset_train: Option<&'a Provenance>,
    dataset_test: Option<&'a Provenance>,
    build: String,
    started_at: String,
    finished_at: Option<String>,
    out_dir: String,
}

fn now_iso() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn build_id() -> String {
    format!("dtrg {}", env!("CARGO_PKG_VERSION"))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    f.write_all(contents)?;
    Ok(())
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

pub fn confusion_csv(confusion: &[u64], num_classes: usize) -> String {
    let mut out = String::new();
    for row in 0..num_classes {
        let cells: Vec<String> = confusion[row * num_classes..(row + 1) * num_classes]
            .iter()
            .map(u64::to_string)
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn summary_from(metrics: &[EpochMetrics], config_digest: String) -> Summary {
    let last = metrics.last().expect("at least one epoch");
    let (best_epoch, best) = metrics
        .iter()
        .map(|m| (m.epoch, m.test_top1))
        .fold((0, f64::NEG_INFINITY), |acc, (e, v)| if v > acc.1 { (e, v) } else { acc });
    Summary { final_top1: last.test_top1, best_top1: best, best_epoch, config_digest }
}

/// Executes one training run into `out_dir`. The manifest is written up
/// front with status "running" and rewritten on completion or failure, so
/// partial directories are recognizable.
pub fn run_to_dir(spec: &RunSpec, config_bytes: &[u8], out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    spec.validate()?;
    let train_config = spec.train_config();
    let (train_set, test_set) = spec.datasets()?;
    let encoder = spec.encoder(&train_set)?;
    let started_at = now_iso();

    let manifest_path = out_dir.join("manifest.json");
    let write_manifest = |status: &str, finished: Option<String>| -> Result<()> {
        let manifest = Manifest {
            status,
            config: spec,
            resolved_train_config: &train_config,
            encoder: Some(&encoder),
            dataset_train: Some(&train_set.provenance),
            dataset_test: Some(&test_set.provenance),
            build: build_id(),
            started_at: started_at.clone(),
            finished_at: finished,
            out_dir: out_dir.display().to_string(),
        };
        write_file(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())
    };
    write_manifest("running", None)?;

    let outcome = match train(&train_config, &encoder, &train_set, &test_set) {
        Ok(outcome) => outcome,
        Err(e) => {
            write_manifest("failed", Some(now_iso()))?;
            return Err(anyhow::anyhow!(e)).context("training aborted; outputs are partial");
        }
    };

    write_file(&out_dir.join("metrics.csv"), metrics_csv(&outcome.metrics).as_bytes())?;
    let last = outcome.metrics.last().expect("epochs >= 1");
    write_file(
        &out_dir.join("confusion.csv"),
        confusion_csv(&last.confusion, encoder.num_classes).as_bytes(),
    )?;
    let summary = summary_from(&outcome.metrics, sha256_hex(config_bytes));
    write_file(&out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;

    let mut ckpt = Vec::new();
    save_checkpoint(&outcome.params, &mut ckpt)?;
    write_file(&out_dir.join("checkpoint.json"), &ckpt)?;

    if spec.dump_centers {
        let mut buf = Vec::new();
        for (i, centers) in outcome.center_log.iter().enumerate() {
            let mut state = outcome.centers.clone();
            state.c = centers.clone();
            state.epoch = (i + 1) as u32;
            state.write_csv(&mut buf)?;
        }
        write_file(&out_dir.join("centers.csv"), &buf)?;
    }
    if spec.dump_graph {
        let mut buf = Vec::new();
        for g in &outcome.graph_log {
            g.write_csv(&mut buf)?;
        }
        write_file(&out_dir.join("graph.csv"), &buf)?;
    }

    write_manifest("complete", Some(now_iso()))?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_picks_best_epoch() {
        let mk = |epoch: u32, top1: f64| EpochMetrics {
            epoch,
            loss_ce: 0.0,
            loss_ocl: 0.0,
            loss_gsl: 0.0,
            loss_total: 0.0,
            test_top1: top1,
            per_class_accuracy: vec![],
            confusion: vec![],
            seconds: 0.0,
        };
        let s = summary_from(&[mk(1, 0.4), mk(2, 0.9), mk(3, 0.7)], "x".into());
        assert_eq!(s.best_epoch, 2);
        assert_eq!(s.best_top1, 0.9);
        assert_eq!(s.final_top1, 0.7);
    }

    #[test]
    fn confusion_csv_shape() {
        let csv = confusion_csv(&[1, 2, 3, 4], 2);
        assert_eq!(csv, "1,2\n3,4\n");
    }
}
