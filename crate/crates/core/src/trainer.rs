//! The training loop: warm-up, total loss, SGD with momentum and weight
//! decay, multi-step learning-rate schedule, per-epoch center/graph
//! refresh, and evaluation.
//!
//! Epochs are 1-based; epochs `t < warmup_epochs` train with cross entropy
//! only, so the regularizers first act on centers produced by a full epoch
//! of real features. Runs are bit-for-bit deterministic per seed: data
//! shuffling, augmentation, initialization and center initialization draw
//! from independent seeded streams, so enabling augmentation never shifts
//! the draws of the other consumers.

use crate::augment::{cutmix, mixup, sample_lambda, AugmentMode, MixedBatch};
use crate::centers::{ocl_loss, ocl_loss_mixed, CenterState};
use crate::data::Dataset;
use crate::diffcore::{NodeId, Tape};
use crate::model::{
    ce_loss, ce_loss_mixed, forward_features, forward_logits, forward_mid, predict_ensemble,
    predict_single, EncoderSpec, ModelParams,
};
use crate::relgraph::{build_target_graph, gsl_euclidean, gsl_kl, gsl_mixed, sample_graph,
    RelationGraph,
};
use crate::util::{seeded_stream, stream};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GslVariant {
    Euclidean,
    Kl,
}

/// All training hyperparameters for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    /// T_th: epochs strictly below this train with cross entropy only.
    pub warmup_epochs: u32,
    pub batch_size: usize,
    pub lr0: f64,
    pub milestones: Vec<u32>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta: f64,
    pub eta: f64,
    pub tau: f64,
    pub gsl_variant: GslVariant,
    pub augment: AugmentMode,
    pub alpha: f64,
    pub mid_branch: bool,
    pub detach_mid: bool,
    pub seed: u64,
    /// Forces every mixing coefficient to a fixed value (ablation hook).
    #[serde(default)]
    pub lambda_override: Option<f64>,
    /// Record every feature vector seen during training (oracle hook).
    #[serde(default)]
    pub log_features: bool,
    /// Keep each epoch's target-graph snapshot (property-check hook).
    #[serde(default)]
    pub log_graphs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            warmup_epochs: 2,
            batch_size: 16,
            lr0: 0.01,
            milestones: vec![40, 70],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            beta: 1e-3,
            eta: 1.0,
            tau: 1.0,
            gsl_variant: GslVariant::Euclidean,
            augment: AugmentMode::None,
            alpha: 0.1,
            mid_branch: false,
            detach_mid: true,
            seed: 0,
            lambda_override: None,
            log_features: false,
            log_graphs: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 {
            return Err("epochs: must be at least 1".into());
        }
        if self.warmup_epochs == 0 {
            return Err("warmup_epochs: must be at least 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size: must be at least 1".into());
        }
        if self.lr0 <= 0.0 {
            return Err("lr0: must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lr_decay) || self.lr_decay == 0.0 {
            return Err("lr_decay: must be in (0, 1]".into());
        }
        if self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err("momentum: must be in [0, 1)".into());
        }
        if self.weight_decay < 0.0 {
            return Err("weight_decay: must be nonnegative".into());
        }
        if self.beta < 0.0 || self.eta < 0.0 {
            return Err("beta/eta: must be nonnegative".into());
        }
        if self.tau <= 0.0 {
            return Err("tau: must be positive".into());
        }
        if self.alpha <= 0.0 {
            return Err("alpha: must be positive".into());
        }
        if let Some(l) = self.lambda_override {
            if !(0.0..=1.0).contains(&l) {
                return Err("lambda_override: must be in [0, 1]".into());
            }
        }
        let mut prev = 0u32;
        for &m in &self.milestones {
            if m <= prev {
                return Err("milestones: must be strictly increasing".into());
            }
            if m >= self.epochs {
                return Err(format!("milestones: {m} is not below epochs {}", self.epochs));
            }
            prev = m;
        }
        Ok(())
    }
}

/// One epoch's training record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub loss_ce: f64,
    pub loss_ocl: f64,
    pub loss_gsl: f64,
    pub loss_total: f64,
    pub test_top1: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Row-major K×K counts; rows are true classes, columns predictions.
    pub confusion: Vec<u64>,
    pub seconds: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,loss_ce,loss_ocl,loss_gsl,loss_total,test_top1,seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.loss_ce,
            self.loss_ocl,
            self.loss_gsl,
            self.loss_total,
            self.test_top1,
            self.seconds
        )
    }
}

/// Feature log of one epoch, in accumulation order.
#[derive(Clone, Debug)]
pub struct EpochFeatures {
    pub epoch: u32,
    pub features: Vec<f64>,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
    pub lambda: Vec<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub params: ModelParams,
    pub centers: CenterState,
    pub graph: RelationGraph,
    pub graph_log: Vec<RelationGraph>,
    /// Center matrices matching `graph_log`, one snapshot per epoch.
    pub center_log: Vec<Vec<f64>>,
    pub feature_log: Vec<EpochFeatures>,
}

#[derive(Debug)]
pub enum TrainError {
    Config(String),
    NonFiniteLoss { epoch: u32, batch: usize },
    NonFiniteGradient { epoch: u32, batch: usize, detail: String },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            TrainError::NonFiniteLoss { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
            TrainError::NonFiniteGradient { epoch, batch, detail } => {
                write!(f, "non-finite gradient at epoch {epoch}, batch {batch}: {detail}")
            }
        }
    }
}

impl std::error::Error for TrainError {}

/// Eq-21-style combination: L = L_CE + β·L_OCL + η·L_GSL, on the tape.
pub fn total_loss(
    tape: &mut Tape,
    ce: NodeId,
    ocl: NodeId,
    gsl: NodeId,
    beta: f64,
    eta: f64,
) -> NodeId {
    let ocl_w = tape.scale(ocl, beta);
    let gsl_w = tape.scale(gsl, eta);
    let reg = tape.add(ocl_w, gsl_w);
    tape.add(ce, reg)
}

/// SGD with momentum and decoupled-from-nothing weight decay:
/// g ← g + wd·θ; v ← momentum·v + g; θ ← θ − lr·v.
pub fn sgd_step(
    theta: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    assert_eq!(theta.len(), grad.len());
    assert_eq!(theta.len(), velocity.len());
    for i in 0..theta.len() {
        let g = grad[i] + weight_decay * theta[i];
        velocity[i] = momentum * velocity[i] + g;
        theta[i] -= lr * velocity[i];
    }
}

/// Learning rate at a 1-based epoch: lr0 · decay^(#milestones ≤ epoch).
pub fn lr_at(epoch: u32, config: &TrainConfig) -> f64 {
    let crossed = config.milestones.iter().filter(|&&m| m <= epoch).count() as i32;
    config.lr0 * config.lr_decay.powi(crossed)
}

/// Accuracy bookkeeping from a prediction/label stream.
pub fn metrics_from_predictions(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> (f64, Vec<f64>, Vec<u64>) {
    assert_eq!(predictions.len(), labels.len());
    let mut confusion = vec![0u64; num_classes * num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        confusion[y * num_classes + p] += 1;
    }
    let total: u64 = confusion.iter().sum();
    let trace: u64 = (0..num_classes).map(|k| confusion[k * num_classes + k]).sum();
    let top1 = if total == 0 { 0.0 } else { trace as f64 / total as f64 };
    let per_class = (0..num_classes)
        .map(|k| {
            let row: u64 = confusion[k * num_classes..(k + 1) * num_classes].iter().sum();
            if row == 0 {
                0.0
            } else {
                confusion[k * num_classes + k] as f64 / row as f64
            }
        })
        .collect();
    (top1, per_class, confusion)
}

/// Scores a parameter snapshot on the test set: single head, or the
/// two-head softmax ensemble when the mid branch exists.
pub fn evaluate(
    params: &ModelParams,
    test: &Dataset,
    batch_size: usize,
) -> (f64, Vec<f64>, Vec<u64>) {
    let k = params.spec.num_classes;
    let indices: Vec<usize> = (0..test.len()).collect();
    let mut predictions = Vec::with_capacity(test.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, _) = test.gather(chunk);
        let mut tape = Tape::new();
        let binding = params.register_frozen(&mut tape);
        let x_node = tape.constant(x, batch_shape(test, chunk.len()));
        let (z, tap) = forward_features(&mut tape, &params.spec, &binding, x_node);
        let logits = forward_logits(&mut tape, &binding, z);
        if params.spec.mid_branch {
            let mid = forward_mid(&mut tape, &params.spec, &binding, tap, true);
            predictions.extend(predict_ensemble(tape.values(logits), tape.values(mid), k));
        } else {
            predictions.extend(predict_single(tape.values(logits), k));
        }
    }
    metrics_from_predictions(&predictions, &test.labels, k)
}

fn batch_shape(ds: &Dataset, rows: usize) -> Vec<usize> {
    let mut shape = vec![rows];
    shape.extend_from_slice(&ds.input_shape);
    shape
}

/// Runs the full training loop and returns the per-epoch metrics together
/// with the final parameters, centers and graph.
pub fn train(
    config: &TrainConfig,
    encoder: &EncoderSpec,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<TrainOutcome, TrainError> {
    config.validate().map_err(TrainError::Config)?;
    encoder.validate().map_err(TrainError::Config)?;
    if encoder.num_classes != train_set.num_classes || train_set.num_classes != test_set.num_classes
    {
        return Err(TrainError::Config(format!(
            "class count mismatch: encoder {}, train {}, test {}",
            encoder.num_classes, train_set.num_classes, test_set.num_classes
        )));
    }
    if train_set.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    if config.mid_branch != encoder.mid_branch {
        return Err(TrainError::Config(format!(
            "mid_branch disagreement: config says {}, encoder says {}",
            config.mid_branch, encoder.mid_branch
        )));
    }
    if config.augment == AugmentMode::Cutmix && train_set.input_shape.len() != 3 {
        return Err(TrainError::Config(
            "cutmix requires spatially structured [C, H, W] inputs".into(),
        ));
    }

    let k = encoder.num_classes;
    let d = encoder.feature_dim;
    let mut params = ModelParams::init(encoder.clone(), config.seed);
    let mut velocity: Vec<Vec<f64>> =
        params.tensors_mut().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut centers = CenterState::init(k, d, config.seed);
    let mut graph = build_target_graph(&centers, config.tau);
    let mut rng_shuffle = seeded_stream(config.seed, stream::SHUFFLE);
    let mut rng_augment = seeded_stream(config.seed, stream::AUGMENT);

    let n = train_set.len();
    let mut metrics = Vec::with_capacity(config.epochs as usize);
    let mut graph_log = Vec::new();
    let mut center_log = Vec::new();
    let mut feature_log = Vec::new();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, config);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_shuffle);

        let mut sum_ce = 0.0;
        let mut sum_ocl = 0.0;
        let mut sum_gsl = 0.0;
        let mut sum_total = 0.0;
        let mut epoch_features = EpochFeatures {
            epoch,
            features: Vec::new(),
            labels_a: Vec::new(),
            labels_b: Vec::new(),
            lambda: Vec::new(),
        };

        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let m = chunk.len();
            let (x_raw, y_raw) = train_set.gather(chunk);
            let batch = make_batch(config, train_set, x_raw, y_raw, &mut rng_augment);

            let mut tape = Tape::new();
            let binding = params.register(&mut tape);
            let x_node = tape.constant(batch.inputs.clone(), batch_shape(train_set, m));
            let (z, tap) = forward_features(&mut tape, encoder, &binding, x_node);

            // Centers accumulate detached feature values as produced.
            if batch.is_mixed() {
                centers.accumulate_mixed(
                    tape.values(z),
                    &batch.labels_a,
                    &batch.labels_b,
                    &batch.lambda,
                );
            } else {
                centers.accumulate(tape.values(z), &batch.labels_a);
            }
            if config.log_features {
                epoch_features.features.extend_from_slice(tape.values(z));
                epoch_features.labels_a.extend_from_slice(&batch.labels_a);
                epoch_features.labels_b.extend_from_slice(&batch.labels_b);
                epoch_features.lambda.extend_from_slice(&batch.lambda);
            }

            let logits = forward_logits(&mut tape, &binding, z);
            let ce = if batch.is_mixed() {
                ce_loss_mixed(&mut tape, logits, &batch.labels_a, &batch.labels_b, &batch.lambda)
            } else {
                ce_loss(&mut tape, logits, &batch.labels_a)
            };

            // Warm-up: regularizers are skipped entirely below T_th, which
            // also makes a β=η=0 run the same computation as a CE baseline.
            let regularize =
                epoch >= config.warmup_epochs && (config.beta > 0.0 || config.eta > 0.0);
            let (loss_node, ce_v, ocl_v, gsl_v) = if regularize {
                let ocl = if batch.is_mixed() {
                    ocl_loss_mixed(
                        &mut tape,
                        z,
                        &batch.labels_a,
                        &batch.labels_b,
                        &batch.lambda,
                        &centers,
                    )
                } else {
                    ocl_loss(&mut tape, z, &batch.labels_a, &centers)
                };
                let sg = sample_graph(&mut tape, z, &centers, config.tau);
                let gsl = if batch.is_mixed() {
                    // The mixed similarity loss is Euclidean by construction.
                    gsl_mixed(&mut tape, sg.s, &graph, &batch.labels_a, &batch.labels_b, &batch.lambda)
                } else {
                    match config.gsl_variant {
                        GslVariant::Euclidean => gsl_euclidean(&mut tape, sg.s, &graph, &batch.labels_a),
                        GslVariant::Kl => gsl_kl(&mut tape, sg.s_hat, &graph, &batch.labels_a),
                    }
                };
                let total = total_loss(&mut tape, ce, ocl, gsl, config.beta, config.eta);
                (total, tape.scalar(ce), tape.scalar(ocl), tape.scalar(gsl))
            } else {
                (ce, tape.scalar(ce), 0.0, 0.0)
            };
            let total_v = tape.scalar(loss_node);
            if !total_v.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_idx });
            }

            // The mid branch adds its own supervision on top of the
            // recorded total; with detach its gradients stay in the branch.
            let optimized = if encoder.mid_branch {
                let p_mid = forward_mid(&mut tape, encoder, &binding, tap, config.detach_mid);
                let mid_ce = if batch.is_mixed() {
                    ce_loss_mixed(&mut tape, p_mid, &batch.labels_a, &batch.labels_b, &batch.lambda)
                } else {
                    ce_loss(&mut tape, p_mid, &batch.labels_a)
                };
                tape.add(loss_node, mid_ce)
            } else {
                loss_node
            };

            tape.backward(optimized);
            params.pull_grads(&tape).map_err(|detail| TrainError::NonFiniteGradient {
                epoch,
                batch: batch_idx,
                detail,
            })?;
            for ((_, tensor), vel) in params.tensors_mut().into_iter().zip(velocity.iter_mut()) {
                let grad = tensor.grad.take().expect("gradient pulled above");
                sgd_step(&mut tensor.values, &grad, vel, lr, config.momentum, config.weight_decay);
            }

            let w = m as f64;
            sum_ce += ce_v * w;
            sum_ocl += ocl_v * w;
            sum_gsl += gsl_v * w;
            sum_total += total_v * w;
        }

        centers.finalize_epoch();
        graph = build_target_graph(&centers, config.tau);
        if config.log_graphs {
            graph_log.push(graph.clone());
            center_log.push(centers.c.clone());
        }
        if config.log_features {
            feature_log.push(epoch_features);
        }

        let (top1, per_class, confusion) = evaluate(&params, test_set, config.batch_size);
        metrics.push(EpochMetrics {
            epoch,
            loss_ce: sum_ce / n as f64,
            loss_ocl: sum_ocl / n as f64,
            loss_gsl: sum_gsl / n as f64,
            loss_total: sum_total / n as f64,
            test_top1: top1,
            per_class_accuracy: per_class,
            confusion,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutcome { metrics, params, centers, graph, graph_log, center_log, feature_log })
}

fn make_batch(
    config: &TrainConfig,
    train_set: &Dataset,
    x: Vec<f64>,
    y: Vec<usize>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> MixedBatch {
    let m = y.len();
    let width = train_set.input_size();
    match config.augment {
        AugmentMode::None => MixedBatch::plain(x, train_set.input_shape.clone(), y),
        AugmentMode::Mixup => {
            let lam =
                config.lambda_override.unwrap_or_else(|| sample_lambda(config.alpha, rng));
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(rng);
            let mut mixed = Vec::with_capacity(x.len());
            let mut labels_b = Vec::with_capacity(m);
            for i in 0..m {
                let a = &x[i * width..(i + 1) * width];
                let b = &x[perm[i] * width..(perm[i] + 1) * width];
                mixed.extend(mixup(a, b, lam));
                labels_b.push(y[perm[i]]);
            }
            MixedBatch {
                inputs: mixed,
                input_shape: train_set.input_shape.clone(),
                labels_a: y,
                labels_b,
                lambda: vec![lam; m],
                mode: AugmentMode::Mixup,
            }
        }
        AugmentMode::Cutmix => {
            let lam_raw =
                config.lambda_override.unwrap_or_else(|| sample_lambda(config.alpha, rng));
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(rng);
            let mut mixed = Vec::with_capacity(x.len());
            let mut labels_b = Vec::with_capacity(m);
            let mut lambda = Vec::with_capacity(m);
            for i in 0..m {
                let a = &x[i * width..(i + 1) * width];
                let b = &x[perm[i] * width..(perm[i] + 1) * width];
                let (out, adj, _) = cutmix(a, b, &train_set.input_shape, lam_raw, rng);
                mixed.extend(out);
                labels_b.push(y[perm[i]]);
                lambda.push(adj);
            }
            MixedBatch {
                inputs: mixed,
                input_shape: train_set.input_shape.clone(),
                labels_a: y,
                labels_b,
                lambda,
                mode: AugmentMode::Cutmix,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn total_loss_with_zero_weights_is_ce() {
        let mut tape = Tape::new();
        let mut ce_t = Tensor::param(vec![1], vec![1.25]);
        let ce = tape.leaf(&mut ce_t);
        let ocl = tape.scalar_constant(7.0);
        let gsl = tape.scalar_constant(3.0);
        let total = total_loss(&mut tape, ce, ocl, gsl, 0.0, 0.0);
        assert_eq!(tape.scalar(total), 1.25);
        tape.backward(total);
        assert_eq!(tape.grad(ce), &[1.0]);
    }

    #[test]
    fn total_loss_hand_value() {
        // β=1e-3 with OCL=5, η=1 with GSL=2, CE=1 → 3.005.
        let mut tape = Tape::new();
        let ce = tape.scalar_constant(1.0);
        let ocl = tape.scalar_constant(5.0);
        let gsl = tape.scalar_constant(2.0);
        let total = total_loss(&mut tape, ce, ocl, gsl, 1e-3, 1.0);
        assert!((tape.scalar(total) - 3.005).abs() < 1e-9);
    }

    #[test]
    fn sgd_plain_step() {
        let mut theta = vec![1.0, -2.0];
        let mut vel = vec![0.0, 0.0];
        sgd_step(&mut theta, &[0.5, -1.0], &mut vel, 0.1, 0.0, 0.0);
        assert_eq!(theta, vec![0.95, -1.9]);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // θ=1, g=1, momentum 0.9, lr 0.1: after one step θ=0.9, after a
        // second identical gradient v=1.9 and θ=0.71.
        let mut theta = vec![1.0];
        let mut vel = vec![0.0];
        sgd_step(&mut theta, &[1.0], &mut vel, 0.1, 0.9, 0.0);
        assert!((theta[0] - 0.9).abs() < 1e-9);
        assert!((vel[0] - 1.0).abs() < 1e-9);
        sgd_step(&mut theta, &[1.0], &mut vel, 0.1, 0.9, 0.0);
        assert!((vel[0] - 1.9).abs() < 1e-9);
        assert!((theta[0] - 0.71).abs() < 1e-9);
    }

    #[test]
    fn sgd_matches_reference_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(44);
        let (lr, momentum, wd) = (0.05, 0.9, 1e-4);
        let mut theta = vec![0.3, -0.8, 1.2];
        let mut vel = vec![0.0; 3];
        let mut ref_theta = theta.clone();
        let mut ref_vel = vel.clone();
        for _ in 0..100 {
            let g: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            sgd_step(&mut theta, &g, &mut vel, lr, momentum, wd);
            for i in 0..3 {
                let gg = g[i] + wd * ref_theta[i];
                ref_vel[i] = momentum * ref_vel[i] + gg;
                ref_theta[i] -= lr * ref_vel[i];
            }
            for i in 0..3 {
                assert!((theta[i] - ref_theta[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lr_schedule_matches_milestones() {
        let config = TrainConfig {
            epochs: 100,
            milestones: vec![40, 70],
            lr0: 0.01,
            lr_decay: 0.1,
            ..TrainConfig::default()
        };
        assert!((lr_at(39, &config) - 0.01).abs() < 1e-12);
        assert!((lr_at(40, &config) - 0.001).abs() < 1e-12);
        assert!((lr_at(69, &config) - 0.001).abs() < 1e-12);
        assert!((lr_at(71, &config) - 0.0001).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_no_milestones_is_constant() {
        let config =
            TrainConfig { milestones: vec![], lr0: 0.02, ..TrainConfig::default() };
        assert_eq!(lr_at(1, &config), 0.02);
        assert_eq!(lr_at(99, &config), 0.02);
    }

    #[test]
    fn lr_schedule_past_all_milestones() {
        let config = TrainConfig {
            epochs: 100,
            milestones: vec![10, 20, 30],
            lr0: 1.0,
            lr_decay: 0.5,
            ..TrainConfig::default()
        };
        assert!((lr_at(99, &config) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn metrics_perfect_predictor() {
        let labels = vec![0, 1, 2, 1, 0];
        let (top1, per_class, confusion) = metrics_from_predictions(&labels, &labels, 3);
        assert_eq!(top1, 1.0);
        assert_eq!(per_class, vec![1.0, 1.0, 1.0]);
        let trace: u64 = (0..3).map(|k| confusion[k * 3 + k]).sum();
        assert_eq!(trace, 5);
    }

    #[test]
    fn metrics_constant_predictor() {
        let labels = vec![0, 1, 2, 1];
        let preds = vec![1, 1, 1, 1];
        let (top1, per_class, confusion) = metrics_from_predictions(&preds, &labels, 3);
        assert_eq!(top1, 0.5);
        assert_eq!(per_class, vec![0.0, 1.0, 0.0]);
        // Exactly one nonzero column.
        for k in 0..3 {
            assert_eq!(confusion[k * 3], 0);
            assert_eq!(confusion[k * 3 + 2], 0);
        }
    }

    #[test]
    fn metrics_random_predictor_near_chance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(50);
        let n = 10_000;
        let k = 10;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let (top1, _, _) = metrics_from_predictions(&preds, &labels, k);
        assert!((top1 - 0.1).abs() < 0.02, "top1 {top1}");
    }

    #[test]
    fn metrics_empty_class_has_zero_accuracy() {
        let labels = vec![0, 0];
        let preds = vec![0, 1];
        let (_, per_class, _) = metrics_from_predictions(&preds, &labels, 3);
        assert_eq!(per_class[2], 0.0, "0/0 row defined as 0");
    }

    #[test]
    fn config_validation_catches_bad_milestones() {
        let config = TrainConfig {
            epochs: 50,
            milestones: vec![40, 70],
            ..TrainConfig::default()
        };
        assert!(config.validate().is_err());
        let config = TrainConfig {
            epochs: 100,
            milestones: vec![40, 40],
            ..TrainConfig::default()
        };
        assert!(config.validate().is_err());
    }
}
