//! Online, non-parametric class centers and the online center loss.
//!
//! Centers are epoch-level feature means: during epoch `t` the per-class sum
//! matrix `M` and count vector `V` accumulate detached features, and at the
//! epoch boundary each class center becomes `M[j]/V[j]`. Losses always read
//! the centers finalized at the end of the previous epoch, never the ones
//! being accumulated, so no gradient can reach a center.

use crate::diffcore::{NodeId, Tape};
use crate::util::{seeded_stream, stream};
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::Write;

/// Count threshold below which a class is treated as unseen for the epoch.
pub const EPS_COUNT: f64 = 1e-8;

/// Class-center state: the center matrix `C` from the previous epoch plus
/// the running accumulators for the current one.
#[derive(Clone, Debug)]
pub struct CenterState {
    /// K×d center matrix, row-major. Constant within an epoch.
    pub c: Vec<f64>,
    /// K×d running feature sums for the current epoch.
    pub m: Vec<f64>,
    /// Per-class accumulated counts (fractional under mixing).
    pub v: Vec<f64>,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Completed epochs; 0 means `c` still holds the random init.
    pub epoch: u32,
}

impl CenterState {
    /// Centers initialized i.i.d. standard normal from a seeded stream.
    pub fn init(num_classes: usize, feature_dim: usize, seed: u64) -> Self {
        assert!(num_classes > 0 && feature_dim > 0, "class count and feature dim must be positive");
        let mut rng = seeded_stream(seed, stream::CENTERS);
        let c = (0..num_classes * feature_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        CenterState {
            c,
            m: vec![0.0; num_classes * feature_dim],
            v: vec![0.0; num_classes],
            num_classes,
            feature_dim,
            epoch: 0,
        }
    }

    pub fn center_row(&self, class: usize) -> &[f64] {
        &self.c[class * self.feature_dim..(class + 1) * self.feature_dim]
    }

    /// Adds a batch of detached features under their labels:
    /// `M[y] += z`, `V[y] += 1`.
    pub fn accumulate(&mut self, features: &[f64], labels: &[usize]) {
        let d = self.feature_dim;
        assert_eq!(features.len(), labels.len() * d, "feature/label count mismatch");
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < self.num_classes, "label {y} out of range");
            for j in 0..d {
                self.m[y * d + j] += features[i * d + j];
            }
            self.v[y] += 1.0;
        }
    }

    /// Mixed-sample accumulation: each interpolated feature is split across
    /// its two source classes, `(1−λ)` to `y_a` and `λ` to `y_b`, so every
    /// sample still contributes total mass 1.
    pub fn accumulate_mixed(
        &mut self,
        features: &[f64],
        labels_a: &[usize],
        labels_b: &[usize],
        lambda: &[f64],
    ) {
        let d = self.feature_dim;
        let n = labels_a.len();
        assert_eq!(features.len(), n * d, "feature/label count mismatch");
        assert_eq!(labels_b.len(), n);
        assert_eq!(lambda.len(), n);
        for i in 0..n {
            let (ya, yb, lam) = (labels_a[i], labels_b[i], lambda[i]);
            assert!(ya < self.num_classes && yb < self.num_classes, "label out of range");
            assert!((0.0..=1.0).contains(&lam), "lambda {lam} outside [0,1]");
            for j in 0..d {
                let z = features[i * d + j];
                self.m[ya * d + j] += (1.0 - lam) * z;
                self.m[yb * d + j] += lam * z;
            }
            self.v[ya] += 1.0 - lam;
            self.v[yb] += lam;
        }
    }

    /// Ends the epoch: classes with accumulated mass become their mean
    /// feature, unseen classes keep their previous center, and the
    /// accumulators reset.
    pub fn finalize_epoch(&mut self) {
        let d = self.feature_dim;
        for j in 0..self.num_classes {
            if self.v[j] > EPS_COUNT {
                for k in 0..d {
                    self.c[j * d + k] = self.m[j * d + k] / self.v[j];
                }
            }
        }
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.epoch += 1;
    }

    /// CSV dump of the current center matrix: an epoch header line, then
    /// K rows of d comma-separated values.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "# epoch {}", self.epoch)?;
        for j in 0..self.num_classes {
            let row: Vec<String> = self.center_row(j).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Online center loss: mean over the batch of ‖z_i − C[y_i]‖₂², built on
/// the tape so it is differentiable in `z`. The centers enter as constants.
pub fn ocl_loss(tape: &mut Tape, z: NodeId, labels: &[usize], state: &CenterState) -> NodeId {
    let targets = gather_rows(&state.c, state.feature_dim, state.num_classes, labels);
    let batch = labels.len();
    let t = tape.constant(targets, vec![batch, state.feature_dim]);
    let diff = tape.sub(z, t);
    let sq = tape.mul(diff, diff);
    let per_row = tape.sum_rows(sq);
    let total = tape.sum_all(per_row);
    tape.scale(total, 1.0 / batch as f64)
}

/// Mixed online center loss: mean of
/// `(1−λ)‖z̃−C[y_a]‖² + λ‖z̃−C[y_b]‖²`.
pub fn ocl_loss_mixed(
    tape: &mut Tape,
    z: NodeId,
    labels_a: &[usize],
    labels_b: &[usize],
    lambda: &[f64],
    state: &CenterState,
) -> NodeId {
    let batch = labels_a.len();
    assert_eq!(labels_b.len(), batch);
    assert_eq!(lambda.len(), batch);
    assert!(lambda.iter().all(|l| (0.0..=1.0).contains(l)), "lambda outside [0,1]");
    let per_a = squared_dist_rows(tape, z, labels_a, state);
    let per_b = squared_dist_rows(tape, z, labels_b, state);
    let wa: Vec<f64> = lambda.iter().map(|l| 1.0 - l).collect();
    let weighted_a = tape.mul_const_vec(per_a, &wa);
    let weighted_b = tape.mul_const_vec(per_b, lambda);
    let combined = tape.add(weighted_a, weighted_b);
    let total = tape.sum_all(combined);
    tape.scale(total, 1.0 / batch as f64)
}

/// Per-sample ‖z_i − C[y_i]‖² as a length-batch node.
fn squared_dist_rows(tape: &mut Tape, z: NodeId, labels: &[usize], state: &CenterState) -> NodeId {
    let targets = gather_rows(&state.c, state.feature_dim, state.num_classes, labels);
    let t = tape.constant(targets, vec![labels.len(), state.feature_dim]);
    let diff = tape.sub(z, t);
    let sq = tape.mul(diff, diff);
    tape.sum_rows(sq)
}

pub(crate) fn gather_rows(
    matrix: &[f64],
    width: usize,
    rows: usize,
    indices: &[usize],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(indices.len() * width);
    for &i in indices {
        assert!(i < rows, "label {i} out of range");
        out.extend_from_slice(&matrix[i * width..(i + 1) * width]);
    }
    out
}
