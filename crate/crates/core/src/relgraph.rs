//! Inter-class target relation graphs and the graph-similarity losses.
//!
//! The target graph holds exp-cosine similarities between the previous
//! epoch's class centers and is a constant regression target for the whole
//! epoch. Each sample gets a K-vector graph representation measured against
//! the same centers; the Euclidean loss compares the raw exponentials, the
//! KL loss compares the sum-normalized rows in the direction KL(Ĝ‖Ŝ).

use crate::centers::{gather_rows, CenterState};
use crate::diffcore::{NodeId, Tape};
use std::io::Write;

pub const NORM_EPS: f64 = 1e-12;

/// Cosine similarity with eps-guarded norms, clamped into [−1, 1].
pub fn cos_sim(a: &[f64], b: &[f64], eps: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine of different-length vectors");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Exp-cosine similarity, strictly positive and monotone in the cosine.
pub fn sim(a: &[f64], b: &[f64], tau: f64) -> f64 {
    assert!(tau > 0.0, "temperature must be positive");
    (cos_sim(a, b, NORM_EPS) * (1.0 / tau)).exp()
}

/// Rows divided by max(‖row‖₂, eps); the same arithmetic as the tape's
/// normalization op, so center rows and taped features stay bit-comparable.
pub fn normalize_rows(values: &[f64], rows: usize, cols: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &values[i * cols..(i + 1) * cols];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = norm.max(eps);
        for j in 0..cols {
            out[i * cols + j] = row[j] / denom;
        }
    }
    out
}

/// Epoch snapshot of the K×K target relation graph.
#[derive(Clone, Debug)]
pub struct RelationGraph {
    /// Raw exp-cosine entries, row-major K×K.
    pub g: Vec<f64>,
    /// Row-normalized graph (each row sums to 1).
    pub g_hat: Vec<f64>,
    pub num_classes: usize,
    pub tau: f64,
    /// Epoch of the center snapshot this graph was built from.
    pub epoch: u32,
}

impl RelationGraph {
    pub fn row(&self, class: usize) -> &[f64] {
        &self.g[class * self.num_classes..(class + 1) * self.num_classes]
    }

    pub fn row_hat(&self, class: usize) -> &[f64] {
        &self.g_hat[class * self.num_classes..(class + 1) * self.num_classes]
    }

    /// CSV dump: epoch header line, then K rows of K entries.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "# epoch {}", self.epoch)?;
        for k in 0..self.num_classes {
            let row: Vec<String> = self.row(k).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Builds the target graph from the previous-epoch centers. The result is a
/// constant: no gradient ever flows into it.
pub fn build_target_graph(state: &CenterState, tau: f64) -> RelationGraph {
    build_target_graph_raw(&state.c, state.num_classes, state.feature_dim, tau, state.epoch)
}

pub fn build_target_graph_raw(
    c: &[f64],
    num_classes: usize,
    feature_dim: usize,
    tau: f64,
    epoch: u32,
) -> RelationGraph {
    assert!(tau > 0.0, "temperature must be positive");
    assert!(c.iter().all(|v| v.is_finite()), "centers must be finite");
    let inv_tau = 1.0 / tau;
    let cn = normalize_rows(c, num_classes, feature_dim, NORM_EPS);
    let mut g = vec![0.0; num_classes * num_classes];
    for k in 0..num_classes {
        for l in 0..num_classes {
            let mut dot = 0.0;
            for p in 0..feature_dim {
                dot += cn[k * feature_dim + p] * cn[l * feature_dim + p];
            }
            g[k * num_classes + l] = (dot.clamp(-1.0, 1.0) * inv_tau).exp();
        }
    }
    let mut g_hat = vec![0.0; num_classes * num_classes];
    for k in 0..num_classes {
        let row = &g[k * num_classes..(k + 1) * num_classes];
        let sum: f64 = row.iter().sum();
        for l in 0..num_classes {
            g_hat[k * num_classes + l] = row[l] / sum;
        }
    }
    RelationGraph { g, g_hat, num_classes, tau, epoch }
}

/// Per-sample graph representations on the tape: raw `S` and row-normalized
/// `S_hat`, both differentiable in the features only.
#[derive(Clone, Copy, Debug)]
pub struct SampleGraphBatch {
    pub s: NodeId,
    pub s_hat: NodeId,
}

/// S[i][j] = exp(cos(z_i, C_j)/τ) against the constant centers.
pub fn sample_graph(tape: &mut Tape, z: NodeId, state: &CenterState, tau: f64) -> SampleGraphBatch {
    assert!(tau > 0.0, "temperature must be positive");
    let d = state.feature_dim;
    let k = state.num_classes;
    assert_eq!(tape.shape(z)[1], d, "feature width must match centers");
    let cn = normalize_rows(&state.c, k, d, NORM_EPS);
    // Transposed normalized centers as a d×K constant.
    let mut cn_t = vec![0.0; d * k];
    for row in 0..k {
        for col in 0..d {
            cn_t[col * k + row] = cn[row * d + col];
        }
    }
    let cn_node = tape.constant(cn_t, vec![d, k]);
    let zn = tape.l2_normalize_rows(z, NORM_EPS);
    let dots = tape.matmul(zn, cn_node);
    let scaled = tape.scale(dots, 1.0 / tau);
    let s = tape.exp(scaled);
    let row_sums = tape.sum_rows(s);
    let s_hat = tape.row_div(s, row_sums);
    SampleGraphBatch { s, s_hat }
}

/// Euclidean graph-similarity loss: mean over the batch of ‖S_i − G[y_i]‖₂²
/// on the raw exponentials.
pub fn gsl_euclidean(
    tape: &mut Tape,
    s: NodeId,
    graph: &RelationGraph,
    labels: &[usize],
) -> NodeId {
    let batch = labels.len();
    let per_row = squared_dist_to_graph_rows(tape, s, graph, labels);
    let total = tape.sum_all(per_row);
    tape.scale(total, 1.0 / batch as f64)
}

/// KL graph-similarity loss: mean over the batch of KL(Ĝ[y_i] ‖ Ŝ_i).
/// The target rows are constants, so gradient flows through Ŝ only.
pub fn gsl_kl(tape: &mut Tape, s_hat: NodeId, graph: &RelationGraph, labels: &[usize]) -> NodeId {
    let batch = labels.len();
    let k = graph.num_classes;
    let targets = gather_rows(&graph.g_hat, k, k, labels);
    assert!(targets.iter().all(|&v| v > 0.0), "target rows must be strictly positive");
    assert!(
        tape.values(s_hat).iter().all(|&v| v > 0.0),
        "sample rows must be strictly positive"
    );
    // KL(Ĝ‖Ŝ) = Σ Ĝ ln Ĝ − Σ Ĝ ln Ŝ; the first term is constant. Summed
    // row-by-row in the same order as the taped cross term so the loss is
    // exactly zero when Ŝ equals Ĝ bit for bit.
    let entropy_total: f64 = (0..batch)
        .map(|i| {
            targets[i * k..(i + 1) * k].iter().map(|gv| gv * gv.ln()).sum::<f64>()
        })
        .sum();
    let entropy_term = entropy_total * (1.0 / batch as f64);
    let t = tape.constant(targets, vec![batch, k]);
    let ln_s = tape.ln(s_hat);
    let weighted = tape.mul(t, ln_s);
    let per_row = tape.sum_rows(weighted);
    let total = tape.sum_all(per_row);
    let cross = tape.scale(total, -1.0 / batch as f64);
    tape.add_scalar(cross, entropy_term)
}

/// Mixed graph-similarity loss (Euclidean form):
/// mean of `(1−λ)‖S_i − G[y_a]‖² + λ‖S_i − G[y_b]‖²`.
pub fn gsl_mixed(
    tape: &mut Tape,
    s: NodeId,
    graph: &RelationGraph,
    labels_a: &[usize],
    labels_b: &[usize],
    lambda: &[f64],
) -> NodeId {
    let batch = labels_a.len();
    assert_eq!(labels_b.len(), batch);
    assert_eq!(lambda.len(), batch);
    assert!(lambda.iter().all(|l| (0.0..=1.0).contains(l)), "lambda outside [0,1]");
    let per_a = squared_dist_to_graph_rows(tape, s, graph, labels_a);
    let per_b = squared_dist_to_graph_rows(tape, s, graph, labels_b);
    let wa: Vec<f64> = lambda.iter().map(|l| 1.0 - l).collect();
    let weighted_a = tape.mul_const_vec(per_a, &wa);
    let weighted_b = tape.mul_const_vec(per_b, lambda);
    let combined = tape.add(weighted_a, weighted_b);
    let total = tape.sum_all(combined);
    tape.scale(total, 1.0 / batch as f64)
}

fn squared_dist_to_graph_rows(
    tape: &mut Tape,
    s: NodeId,
    graph: &RelationGraph,
    labels: &[usize],
) -> NodeId {
    let k = graph.num_classes;
    let targets = gather_rows(&graph.g, k, k, labels);
    let t = tape.constant(targets, vec![labels.len(), k]);
    let diff = tape.sub(s, t);
    let sq = tape.mul(diff, diff);
    tape.sum_rows(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::E;

    fn random_centers(k: usize, d: usize, seed: u64) -> CenterState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = CenterState::init(k, d, 0);
        s.c = (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        s
    }

    #[test]
    fn cos_orthogonal_is_zero() {
        assert_eq!(cos_sim(&[1.0, 0.0], &[0.0, 1.0], NORM_EPS), 0.0);
    }

    #[test]
    fn cos_is_scale_invariant() {
        let v = [0.3, -1.2, 0.8];
        let v3: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        assert!((cos_sim(&v, &v3, NORM_EPS) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cos_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let want = dot
                / (a.iter().map(|x| x * x).sum::<f64>().sqrt()
                    * b.iter().map(|x| x * x).sum::<f64>().sqrt());
            assert!((cos_sim(&a, &b, NORM_EPS) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sim_identical_vectors_tau_one_is_e() {
        let v = [0.5, 1.5, -0.2];
        assert!((sim(&v, &v, 1.0) - E).abs() < 1e-12);
    }

    #[test]
    fn sim_antipodal_tau_two() {
        let v = [1.0, -2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((sim(&v, &neg, 2.0) - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "temperature")]
    fn sim_rejects_nonpositive_tau() {
        sim(&[1.0], &[1.0], 0.0);
    }

    #[test]
    fn target_graph_orthogonal_two_classes() {
        let mut s = CenterState::init(2, 2, 0);
        s.c = vec![1.0, 0.0, 0.0, 1.0];
        let g = build_target_graph(&s, 1.0);
        assert!((g.g[0] - E).abs() < 1e-12);
        assert!((g.g[1] - 1.0).abs() < 1e-12);
        assert!((g.g[2] - 1.0).abs() < 1e-12);
        assert!((g.g[3] - E).abs() < 1e-12);
    }

    #[test]
    fn target_graph_identical_centers_is_uniform() {
        let mut s = CenterState::init(3, 2, 0);
        s.c = vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        let tau = 2.0;
        let g = build_target_graph(&s, tau);
        for &v in &g.g {
            assert!((v - (1.0f64 / tau).exp()).abs() < 1e-12);
        }
        for &v in &g.g_hat {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn target_graph_matches_double_loop_oracle() {
        let s = random_centers(5, 4, 31);
        let g = build_target_graph(&s, 1.0);
        for k in 0..5 {
            for l in 0..5 {
                let want = sim(s.center_row(k), s.center_row(l), 1.0);
                assert!((g.g[k * 5 + l] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn target_graph_invariants() {
        for seed in 0..5u64 {
            for &tau in &[1.0, 2.0] {
                let s = random_centers(6, 8, seed);
                let g = build_target_graph(&s, tau);
                let k = 6;
                let (lo, hi) = ((-1.0f64 / tau).exp(), (1.0f64 / tau).exp());
                for a in 0..k {
                    for b in 0..k {
                        assert!((g.g[a * k + b] - g.g[b * k + a]).abs() < 1e-12, "symmetry");
                        assert!(g.g[a * k + b] >= lo && g.g[a * k + b] <= hi, "entry bounds");
                    }
                    assert!((g.g[a * k + a] - hi).abs() < 1e-12, "diagonal");
                    let row_sum: f64 = g.row_hat(a).iter().sum();
                    assert!((row_sum - 1.0).abs() < 1e-9, "row-stochastic");
                    assert!(g.row_hat(a).iter().all(|&v| v > 0.0));
                }
            }
        }
    }

    #[test]
    fn sample_graph_of_center_row_equals_graph_row() {
        let s = random_centers(5, 4, 77);
        let g = build_target_graph(&s, 1.0);
        let mut tape = Tape::new();
        let z = tape.constant(s.center_row(3).to_vec(), vec![1, 4]);
        let batch = sample_graph(&mut tape, z, &s, 1.0);
        let sv = tape.values(batch.s);
        for (a, b) in sv.iter().zip(g.row(3)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn sample_graph_orthogonal_feature_gives_unit_row() {
        let mut s = CenterState::init(2, 3, 0);
        s.c = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let mut tape = Tape::new();
        let z = tape.constant(vec![0.0, 0.0, 2.0], vec![1, 3]);
        let batch = sample_graph(&mut tape, z, &s, 1.0);
        for &v in tape.values(batch.s) {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_graph_gradients_match_finite_differences() {
        let s = random_centers(4, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::param(vec![3, 5], (0..15).map(|_| rng.random_range(-2.0..2.0)).collect());
        let err = grad_check(
            |tape, ids| {
                let batch = sample_graph(tape, ids[0], &s, 1.0);
                tape.sum_all(batch.s)
            },
            &[z],
            1e-5,
        );
        assert!(err < 1e-5, "sample graph grad error {err}");
    }

    #[test]
    fn gsl_euclidean_zero_at_target() {
        let s = random_centers(4, 3, 12);
        let g = build_target_graph(&s, 1.0);
        let mut tape = Tape::new();
        let z = tape.constant([s.center_row(1), s.center_row(2)].concat(), vec![2, 3]);
        let batch = sample_graph(&mut tape, z, &s, 1.0);
        let loss = gsl_euclidean(&mut tape, batch.s, &g, &[1, 2]);
        assert!(tape.scalar(loss) < 1e-12);
    }

    #[test]
    fn gsl_euclidean_hand_value() {
        // K=2, S=[e,1] against G[y]=[1,e]: 2(e−1)².
        let mut g = build_target_graph_raw(&[1.0, 0.0, 0.0, 1.0], 2, 2, 1.0, 0);
        g.g = vec![1.0, E, E, 1.0];
        let mut tape = Tape::new();
        let s = tape.constant(vec![E, 1.0], vec![1, 2]);
        let loss = gsl_euclidean(&mut tape, s, &g, &[0]);
        let want = 2.0 * (E - 1.0) * (E - 1.0);
        assert!((tape.scalar(loss) - want).abs() < 1e-9, "{}", tape.scalar(loss));
    }

    #[test]
    fn gsl_euclidean_matches_direct_formula() {
        let s = random_centers(5, 4, 9);
        let g = build_target_graph(&s, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let zv: Vec<f64> = (0..3 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = [0, 4, 2];
        let mut tape = Tape::new();
        let z = tape.constant(zv.clone(), vec![3, 4]);
        let batch = sample_graph(&mut tape, z, &s, 1.0);
        let loss = gsl_euclidean(&mut tape, batch.s, &g, &labels);

        let mut want = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            for j in 0..5 {
                let sij = sim(&zv[i * 4..(i + 1) * 4], s.center_row(j), 1.0);
                want += (sij - g.g[y * 5 + j]).powi(2);
            }
        }
        want /= 3.0;
        assert!((tape.scalar(loss) - want).abs() < 1e-12);
    }

    #[test]
    fn gsl_kl_zero_when_rows_match() {
        let s = random_centers(4, 3, 40);
        let g = build_target_graph(&s, 1.0);
        // Feed the target rows themselves as Ŝ.
        let rows = [g.row_hat(2), g.row_hat(0)].concat();
        let mut tape = Tape::new();
        let s_hat = tape.constant(rows, vec![2, 4]);
        let loss = gsl_kl(&mut tape, s_hat, &g, &[2, 0]);
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn gsl_kl_hand_value() {
        // Ĝ[y] = [0.5, 0.5], Ŝ = [0.9, 0.1] → 0.5·ln(0.5/0.9) + 0.5·ln(0.5/0.1).
        let mut g = build_target_graph_raw(&[1.0, 0.0, 0.0, 1.0], 2, 2, 1.0, 0);
        g.g_hat = vec![0.5, 0.5, 0.5, 0.5];
        let mut tape = Tape::new();
        let s_hat = tape.constant(vec![0.9, 0.1], vec![1, 2]);
        let loss = gsl_kl(&mut tape, s_hat, &g, &[0]);
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((tape.scalar(loss) - want).abs() < 1e-9);
        assert!((want - 0.510826).abs() < 1e-6);
    }

    #[test]
    fn gsl_kl_nonnegative_on_random_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for trial in 0..100 {
            let k = 5;
            let mut g = build_target_graph_raw(&vec![1.0; k * 3], k, 3, 1.0, 0);
            let mut ghat = vec![0.0; k * k];
            for r in 0..k {
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                for j in 0..k {
                    ghat[r * k + j] = raw[j] / sum;
                }
            }
            g.g_hat = ghat;
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let srow: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let mut tape = Tape::new();
            let s_hat = tape.constant(srow, vec![1, k]);
            let loss = gsl_kl(&mut tape, s_hat, &g, &[trial % k]);
            assert!(tape.scalar(loss) >= 0.0, "Gibbs inequality violated");
        }
    }

    #[test]
    fn gsl_kl_gradients_match_finite_differences() {
        let s = random_centers(4, 5, 33);
        let g = build_target_graph(&s, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Tensor::param(vec![3, 5], (0..15).map(|_| rng.random_range(-2.0..2.0)).collect());
        let labels = [1, 3, 0];
        let err = grad_check(
            |tape, ids| {
                let batch = sample_graph(tape, ids[0], &s, 1.0);
                gsl_kl(tape, batch.s_hat, &g, &labels)
            },
            &[z],
            1e-5,
        );
        assert!(err < 1e-5, "kl grad error {err}");
    }

    #[test]
    fn gsl_mixed_degenerates_to_plain_at_endpoints() {
        let s = random_centers(4, 3, 8);
        let g = build_target_graph(&s, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let zv: Vec<f64> = (0..2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ya = [0, 3];
        let yb = [2, 1];
        let eval_mixed = |lam: f64| {
            let mut tape = Tape::new();
            let z = tape.constant(zv.clone(), vec![2, 3]);
            let batch = sample_graph(&mut tape, z, &s, 1.0);
            let loss = gsl_mixed(&mut tape, batch.s, &g, &ya, &yb, &[lam, lam]);
            tape.scalar(loss)
        };
        let eval_plain = |labels: &[usize]| {
            let mut tape = Tape::new();
            let z = tape.constant(zv.clone(), vec![2, 3]);
            let batch = sample_graph(&mut tape, z, &s, 1.0);
            let loss = gsl_euclidean(&mut tape, batch.s, &g, labels);
            tape.scalar(loss)
        };
        assert_eq!(eval_mixed(0.0).to_bits(), eval_plain(&ya).to_bits());
        assert_eq!(eval_mixed(1.0).to_bits(), eval_plain(&yb).to_bits());
        // Three-point collinearity in λ.
        let (l0, l5, l1) = (eval_mixed(0.0), eval_mixed(0.5), eval_mixed(1.0));
        assert!((l5 - 0.5 * (l0 + l1)).abs() < 1e-12);
    }

    #[test]
    fn graph_losses_invariant_to_feature_rescaling() {
        let s = random_centers(5, 4, 25);
        let g = build_target_graph(&s, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let zv: Vec<f64> = (0..3 * 4).map(|_| rng.random_range(0.1..2.0)).collect();
        let labels = [0, 2, 4];
        let eval = |scale: f64| {
            let scaled: Vec<f64> = zv.iter().map(|v| v * scale).collect();
            let mut tape = Tape::new();
            let z = tape.constant(scaled, vec![3, 4]);
            let batch = sample_graph(&mut tape, z, &s, 1.0);
            let eu = gsl_euclidean(&mut tape, batch.s, &g, &labels);
            let kl = gsl_kl(&mut tape, batch.s_hat, &g, &labels);
            (tape.scalar(eu), tape.scalar(kl))
        };
        let (eu1, kl1) = eval(1.0);
        let (eu3, kl3) = eval(3.0);
        assert!((eu1 - eu3).abs() < 1e-12);
        assert!((kl1 - kl3).abs() < 1e-12);
    }
}
