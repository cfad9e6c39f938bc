//! Finite-difference verification of every loss term and the composed
//! objective, shared by the CLI entry point and the test suites.

use crate::centers::{ocl_loss, ocl_loss_mixed, CenterState};
use crate::diffcore::{grad_check, Tensor};
use crate::model::{ce_loss, ce_loss_mixed};
use crate::relgraph::{build_target_graph, gsl_euclidean, gsl_kl, gsl_mixed, sample_graph};
use crate::trainer::total_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::Cell;

pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradReportRow {
    pub term: &'static str,
    pub max_rel_error: f64,
}

/// Checks analytic gradients of every loss term against central finite
/// differences on small random scenarios, plus the composed total through
/// a 2-layer encoder. Returns one row per term.
///
/// `corrupt_fixture` deliberately makes one term's re-evaluations disagree
/// with its analytic pass, standing in for a broken backward rule so the
/// failure path of the harness can be exercised end to end.
pub fn gradient_report(corrupt_fixture: bool) -> Vec<GradReportRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let (k, d, batch) = (3, 5, 4);
    let mut centers = CenterState::init(k, d, 99);
    centers.c = (0..k * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let graph = build_target_graph(&centers, 1.0);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..k)).collect();
    let labels_b: Vec<usize> = (0..batch).map(|_| rng.random_range(0..k)).collect();
    let lambda: Vec<f64> = (0..batch).map(|_| rng.random_range(0.05..0.95)).collect();
    let z = Tensor::param(
        vec![batch, d],
        (0..batch * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
    );
    let logits = Tensor::param(
        vec![batch, k],
        (0..batch * k).map(|_| rng.random_range(-2.0..2.0)).collect(),
    );
    let h = 1e-5;

    let mut rows = Vec::new();

    rows.push(GradReportRow {
        term: "ce",
        max_rel_error: grad_check(
            |tape, ids| ce_loss(tape, ids[0], &labels),
            &[logits.clone()],
            h,
        ),
    });

    // The corrupted fixture rescales the loss on every re-evaluation after
    // the analytic pass, so numeric and analytic gradients must disagree.
    let calls = Cell::new(0usize);
    rows.push(GradReportRow {
        term: "ocl",
        max_rel_error: grad_check(
            |tape, ids| {
                let loss = ocl_loss(tape, ids[0], &labels, &centers);
                let factor = if corrupt_fixture && calls.get() > 0 { 1.01 } else { 1.0 };
                calls.set(calls.get() + 1);
                tape.scale(loss, factor)
            },
            &[z.clone()],
            h,
        ),
    });

    rows.push(GradReportRow {
        term: "gsl_euclidean",
        max_rel_error: grad_check(
            |tape, ids| {
                let sg = sample_graph(tape, ids[0], &centers, 1.0);
                gsl_euclidean(tape, sg.s, &graph, &labels)
            },
            &[z.clone()],
            h,
        ),
    });

    rows.push(GradReportRow {
        term: "gsl_kl",
        max_rel_error: grad_check(
            |tape, ids| {
                let sg = sample_graph(tape, ids[0], &centers, 1.0);
                gsl_kl(tape, sg.s_hat, &graph, &labels)
            },
            &[z.clone()],
            h,
        ),
    });

    rows.push(GradReportRow {
        term: "ocl_mixed",
        max_rel_error: grad_check(
            |tape, ids| ocl_loss_mixed(tape, ids[0], &labels, &labels_b, &lambda, &centers),
            &[z.clone()],
            h,
        ),
    });

    rows.push(GradReportRow {
        term: "gsl_mixed",
        max_rel_error: grad_check(
            |tape, ids| {
                let sg = sample_graph(tape, ids[0], &centers, 1.0);
                gsl_mixed(tape, sg.s, &graph, &labels, &labels_b, &lambda)
            },
            &[z.clone()],
            h,
        ),
    });

    // Composed objective through a 2-layer encoder: the gradient must be
    // correct for every weight and bias, not just the feature input.
    let input_dim = 6;
    let hidden = 8;
    let x: Vec<f64> = (0..batch * input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w1 = Tensor::param(
        vec![input_dim, hidden],
        (0..input_dim * hidden).map(|_| rng.random_range(-0.7..0.7)).collect(),
    );
    let b1 = Tensor::param(vec![hidden], (0..hidden).map(|_| rng.random_range(-0.3..0.3)).collect());
    let w2 = Tensor::param(
        vec![hidden, d],
        (0..hidden * d).map(|_| rng.random_range(-0.7..0.7)).collect(),
    );
    let b2 = Tensor::param(vec![d], (0..d).map(|_| rng.random_range(-0.3..0.3)).collect());
    let wc = Tensor::param(vec![d, k], (0..d * k).map(|_| rng.random_range(-0.7..0.7)).collect());
    let bc = Tensor::param(vec![k], (0..k).map(|_| rng.random_range(-0.3..0.3)).collect());
    rows.push(GradReportRow {
        term: "total_composed",
        max_rel_error: grad_check(
            |tape, ids| {
                let x_node = tape.constant(x.clone(), vec![batch, input_dim]);
                let h1 = tape.matmul(x_node, ids[0]);
                let h1 = tape.add_bias(h1, ids[1]);
                let h1 = tape.relu(h1);
                let z = tape.matmul(h1, ids[2]);
                let z = tape.add_bias(z, ids[3]);
                let p = tape.matmul(z, ids[4]);
                let p = tape.add_bias(p, ids[5]);
                let ce = ce_loss_mixed(tape, p, &labels, &labels_b, &lambda);
                let ocl = ocl_loss_mixed(tape, z, &labels, &labels_b, &lambda, &centers);
                let sg = sample_graph(tape, z, &centers, 1.0);
                let gsl = gsl_mixed(tape, sg.s, &graph, &labels, &labels_b, &lambda);
                total_loss(tape, ce, ocl, gsl, 1e-3, 1.0)
            },
            &[w1, b1, w2, b2, wc, bc],
            h,
        ),
    });

    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_covers_every_term_under_tolerance() {
        let rows = gradient_report(false);
        let names: Vec<&str> = rows.iter().map(|r| r.term).collect();
        assert_eq!(
            names,
            vec!["ce", "ocl", "gsl_euclidean", "gsl_kl", "ocl_mixed", "gsl_mixed", "total_composed"]
        );
        for row in &rows {
            assert!(
                row.max_rel_error < GRAD_TOLERANCE,
                "{} error {}",
                row.term,
                row.max_rel_error
            );
        }
    }

    #[test]
    fn corrupt_fixture_trips_the_harness() {
        let rows = gradient_report(true);
        let ocl = rows.iter().find(|r| r.term == "ocl").unwrap();
        assert!(ocl.max_rel_error > GRAD_TOLERANCE, "corruption went undetected");
    }
}
