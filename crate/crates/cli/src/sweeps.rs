//! Robustness sweeps over data sparsity and step imbalance.
//!
//! Each sweep compares the configured DTRG settings against a plain
//! cross-entropy baseline (β = η = 0, no augmentation) across seeded
//! trials. Trials run in parallel; every trial is internally
//! single-threaded and the output rows are sorted, so the CSVs are
//! independent of scheduling.

use crate::config::RunSpec;
use crate::svg::{line_plot, Series, PALETTE};
use anyhow::{bail, Context, Result};
use dtrg_core::data::{sparsify, step_imbalance, Dataset};
use dtrg_core::trainer::train;
use rayon::prelude::*;
use std::fs;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Baseline,
    Dtrg,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Dtrg => "dtrg",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub fraction: f64,
    pub method: Method,
    pub seed: u64,
    pub top1: f64,
    /// Distinct per-class count levels in the transformed training split.
    pub step_levels: usize,
}

fn trial_spec(spec: &RunSpec, method: Method, seed: u64) -> RunSpec {
    let mut s = spec.clone();
    s.seed = seed;
    if method == Method::Baseline {
        s.beta = 0.0;
        s.eta = 0.0;
        s.augment = dtrg_core::augment::AugmentMode::None;
    }
    s
}

fn run_trial(spec: &RunSpec, train_set: &Dataset, test_set: &Dataset) -> Result<f64> {
    let config = spec.train_config();
    let encoder = spec.encoder(train_set)?;
    let outcome = train(&config, &encoder, train_set, test_set)
        .map_err(|e| anyhow::anyhow!("trial seed {}: {e}", spec.seed))?;
    Ok(outcome.metrics.last().expect("epochs >= 1").test_top1)
}

fn count_levels(train_set: &Dataset) -> usize {
    let mut counts = train_set.class_counts();
    counts.sort_unstable();
    counts.dedup();
    counts.len()
}

/// Sweeps training-set sparsity over `fractions`, `n_seeds` trials each.
pub fn sweep_sparsity(spec: &RunSpec, fractions: &[f64], n_seeds: u64) -> Result<Vec<SweepRow>> {
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        bail!("fractions: sparsity keep fractions must be in (0, 1]");
    }
    run_sweep(spec, fractions, n_seeds, |base, fraction, seed| {
        if fraction < 1.0 {
            sparsify(base, fraction, seed)
        } else {
            base.clone()
        }
    })
}

/// Sweeps step-imbalance minority fractions.
pub fn sweep_imbalance(spec: &RunSpec, fractions: &[f64], n_seeds: u64) -> Result<Vec<SweepRow>> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        bail!("fractions: minority fractions must be in [0, 1]");
    }
    run_sweep(spec, fractions, n_seeds, step_imbalance)
}

fn run_sweep(
    spec: &RunSpec,
    fractions: &[f64],
    n_seeds: u64,
    transform: impl Fn(&Dataset, f64, u64) -> Dataset + Sync,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let (base_train, test_set) = spec.datasets()?;

    let mut jobs = Vec::new();
    for &fraction in fractions {
        for method in [Method::Baseline, Method::Dtrg] {
            for trial in 0..n_seeds {
                jobs.push((fraction, method, spec.seed + trial));
            }
        }
    }

    let mut rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|&(fraction, method, seed)| -> Result<SweepRow> {
            let train_set = transform(&base_train, fraction, seed);
            let trial = trial_spec(spec, method, seed);
            let top1 = run_trial(&trial, &train_set, &test_set)?;
            Ok(SweepRow { fraction, method, seed, top1, step_levels: count_levels(&train_set) })
        })
        .collect::<Result<Vec<_>>>()?;

    rows.sort_by(|a, b| {
        a.fraction
            .partial_cmp(&b.fraction)
            .unwrap()
            .then_with(|| a.method.name().cmp(b.method.name()))
            .then_with(|| a.seed.cmp(&b.seed))
    });
    Ok(rows)
}

pub fn rows_csv(rows: &[SweepRow], with_levels: bool) -> String {
    let mut out = String::from(if with_levels {
        "fraction,method,seed,top1,step_levels\n"
    } else {
        "fraction,method,seed,top1\n"
    });
    for r in rows {
        if with_levels {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.fraction,
                r.method.name(),
                r.seed,
                r.top1,
                r.step_levels
            ));
        } else {
            out.push_str(&format!("{},{},{},{}\n", r.fraction, r.method.name(), r.seed, r.top1));
        }
    }
    out
}

/// Mean top-1 per (fraction, method), for plotting and trend checks.
pub fn mean_by_fraction(rows: &[SweepRow], method: Method) -> Vec<(f64, f64)> {
    let mut fractions: Vec<f64> = rows.iter().map(|r| r.fraction).collect();
    fractions.sort_by(|a, b| a.partial_cmp(b).unwrap());
    fractions.dedup();
    fractions
        .into_iter()
        .map(|f| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.fraction == f && r.method == method)
                .map(|r| r.top1)
                .collect();
            (f, vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

pub fn sweep_svg(rows: &[SweepRow], title: &str, x_label: &str) -> String {
    let series = vec![
        Series {
            name: "baseline".into(),
            points: mean_by_fraction(rows, Method::Baseline),
            color: PALETTE[0],
        },
        Series {
            name: "dtrg".into(),
            points: mean_by_fraction(rows, Method::Dtrg),
            color: PALETTE[1],
        },
    ];
    line_plot(title, x_label, "mean top-1", &series)
}

pub fn write_sparsity_outputs(rows: &[SweepRow], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("sweep_sparsity.csv"), rows_csv(rows, false))
        .context("writing sweep_sparsity.csv")?;
    fs::write(
        out_dir.join("sweep_sparsity.svg"),
        sweep_svg(rows, "top-1 vs training sparsity", "keep fraction"),
    )?;
    Ok(())
}

pub fn write_imbalance_outputs(rows: &[SweepRow], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("sweep_imbalance.csv"), rows_csv(rows, true))
        .context("writing sweep_imbalance.csv")?;
    fs::write(
        out_dir.join("sweep_imbalance.svg"),
        sweep_svg(rows, "top-1 vs step imbalance", "minority class fraction"),
    )?;
    Ok(())
}

/// Re-renders the sweep SVGs in a directory from its CSVs.
pub fn rerender_dir(dir: &Path) -> Result<usize> {
    let mut rendered = 0;
    let sparsity = dir.join("sweep_sparsity.csv");
    if sparsity.exists() {
        let rows = parse_rows(&fs::read_to_string(&sparsity)?)?;
        fs::write(
            dir.join("sweep_sparsity.svg"),
            sweep_svg(&rows, "top-1 vs training sparsity", "keep fraction"),
        )?;
        rendered += 1;
    }
    let imbalance = dir.join("sweep_imbalance.csv");
    if imbalance.exists() {
        let rows = parse_rows(&fs::read_to_string(&imbalance)?)?;
        fs::write(
            dir.join("sweep_imbalance.svg"),
            sweep_svg(&rows, "top-1 vs step imbalance", "minority class fraction"),
        )?;
        rendered += 1;
    }
    Ok(rendered)
}

fn parse_rows(csv: &str) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (i, line) in csv.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            bail!("sweep csv line {}: expected at least 4 fields", i + 1);
        }
        rows.push(SweepRow {
            fraction: fields[0].parse().context("fraction")?,
            method: if fields[1] == "baseline" { Method::Baseline } else { Method::Dtrg },
            seed: fields[2].parse().context("seed")?,
            top1: fields[3].parse().context("top1")?,
            step_levels: fields.get(4).and_then(|f| f.parse().ok()).unwrap_or(1),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> RunSpec {
        serde_json::from_str(
            r#"{
                "seed": 1, "epochs": 2, "warmup": 2, "milestones": [],
                "model": {"kind": "mlp", "hidden": [12], "feature_dim": 6},
                "dataset": {"kind": "synthetic", "classes": 4, "superclasses": 2,
                            "input_dim": 8, "per_class": 8, "within_spread": 0.3,
                            "between_spread": 1.0, "seed": 2}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn sparsity_row_count_and_order() {
        let rows = sweep_sparsity(&tiny_spec(), &[1.0, 0.5], 2).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 2);
        // Sorted by fraction, then method name, then seed.
        assert_eq!(rows[0].fraction, 0.5);
        assert_eq!(rows[0].method, Method::Baseline);
        assert_eq!(rows[0].seed, 1);
        assert_eq!(rows[3].method, Method::Dtrg);
        let csv = rows_csv(&rows, false);
        assert!(csv.starts_with("fraction,method,seed,top1\n"));
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn sparsity_is_deterministic_despite_parallelism() {
        let a = sweep_sparsity(&tiny_spec(), &[1.0, 0.3], 2).unwrap();
        let b = sweep_sparsity(&tiny_spec(), &[1.0, 0.3], 2).unwrap();
        assert_eq!(rows_csv(&a, false), rows_csv(&b, false));
    }

    #[test]
    fn imbalance_reports_two_levels() {
        let rows = sweep_imbalance(&tiny_spec(), &[0.5], 1).unwrap();
        assert!(rows.iter().all(|r| r.step_levels == 2), "{rows:?}");
    }

    #[test]
    fn imbalance_zero_fraction_is_balanced() {
        let rows = sweep_imbalance(&tiny_spec(), &[0.0], 1).unwrap();
        assert!(rows.iter().all(|r| r.step_levels == 1));
    }

    #[test]
    fn rejects_out_of_range_fractions() {
        assert!(sweep_sparsity(&tiny_spec(), &[0.0], 1).is_err());
        assert!(sweep_imbalance(&tiny_spec(), &[1.5], 1).is_err());
    }

    #[test]
    fn csv_round_trips_through_parse() {
        let rows = sweep_imbalance(&tiny_spec(), &[0.5, 0.0], 1).unwrap();
        let parsed = parse_rows(&rows_csv(&rows, true)).unwrap();
        assert_eq!(parsed.len(), rows.len());
        for (a, b) in rows.iter().zip(&parsed) {
            assert_eq!(a.fraction, b.fraction);
            assert_eq!(a.top1, b.top1);
            assert_eq!(a.step_levels, b.step_levels);
        }
    }
}
