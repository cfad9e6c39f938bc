//! Encoder, classifier, optional mid-level branch, cross-entropy loss and
//! two-head ensemble inference.
//!
//! Two encoders are provided: an MLP for feature-vector datasets and a tiny
//! two-conv CNN for image datasets (so cutmix has spatial structure to cut).
//! The mid-level branch taps an intermediate activation, runs its own small
//! classifier, and by default its gradients are blocked from the backbone;
//! inference then ensembles the two heads' softmax probabilities.

use crate::diffcore::{NodeId, Tape, Tensor};
use crate::util::{seeded_stream, stream};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: &str = "DTRG-CKPT-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderKind {
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
    },
    /// Two 3×3 conv blocks (conv → ReLU → 2×2 max pool) and global average
    /// pooling; the second conv's channel count is the feature dimension.
    Cnn {
        in_channels: usize,
        height: usize,
        width: usize,
        conv1_channels: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    #[serde(flatten)]
    pub kind: EncoderKind,
    pub feature_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub mid_branch: bool,
    /// MLP only: index of the hidden activation feeding the mid branch.
    #[serde(default)]
    pub mid_tap_layer: usize,
    /// Apply a final ReLU so features are nonnegative, matching the
    /// post-activation pooled features the graph losses are designed around.
    /// Signed features put samples on the far cosine hemisphere where the
    /// exp-cosine pull is weakest, which measurably destabilizes training.
    #[serde(default = "default_true")]
    pub rectified_features: bool,
}

fn default_true() -> bool {
    true
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.feature_dim == 0 || self.num_classes == 0 {
            return Err("feature_dim and num_classes must be positive".into());
        }
        match &self.kind {
            EncoderKind::Mlp { input_dim, hidden } => {
                if *input_dim == 0 {
                    return Err("input_dim must be positive".into());
                }
                if self.mid_branch && self.mid_tap_layer >= hidden.len() {
                    return Err(format!(
                        "mid_tap_layer {} out of range for {} hidden layers",
                        self.mid_tap_layer,
                        hidden.len()
                    ));
                }
            }
            EncoderKind::Cnn { in_channels, height, width, conv1_channels } => {
                if *in_channels == 0 || *conv1_channels == 0 {
                    return Err("channel counts must be positive".into());
                }
                if *height < 4 || *width < 4 {
                    return Err("image too small for two pooling stages".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LinearParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearParams {
    fn init(input: usize, output: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let std = (2.0 / input as f64).sqrt();
        LinearParams {
            w: Tensor::randn(vec![input, output], std, rng),
            b: {
                let mut b = Tensor::zeros(vec![output]);
                b.requires_grad = true;
                b
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvParams {
    /// [filters, in_channels, 3, 3]
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvParams {
    fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        ConvParams {
            w: Tensor::randn(vec![out_ch, in_ch, kernel, kernel], std, rng),
            b: {
                let mut b = Tensor::zeros(vec![out_ch]);
                b.requires_grad = true;
                b
            },
        }
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Mlp(Vec<LinearParams>),
    Cnn { conv1: ConvParams, conv2: ConvParams },
}

#[derive(Clone, Debug)]
pub enum MidProj {
    Linear(LinearParams),
    /// 1×1 conv projection for the CNN encoder.
    Conv(ConvParams),
}

#[derive(Clone, Debug)]
pub struct MidParams {
    pub proj: MidProj,
    pub cls: LinearParams,
}

/// All learnable parameters of one model.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub spec: EncoderSpec,
    pub backbone: Backbone,
    pub classifier: LinearParams,
    pub mid: Option<MidParams>,
}

/// Tape handles for one registration of the parameters.
pub struct ModelBinding {
    backbone: Vec<(NodeId, NodeId)>,
    classifier: (NodeId, NodeId),
    mid: Option<((NodeId, NodeId), (NodeId, NodeId))>,
}

/// Output handles of one forward pass.
pub struct ForwardPass {
    pub z: NodeId,
    pub logits: NodeId,
    pub mid_logits: Option<NodeId>,
}

impl ModelParams {
    /// Seeded scaled-Gaussian initialization (std √(2/fan_in), zero biases).
    pub fn init(spec: EncoderSpec, seed: u64) -> Self {
        spec.validate().expect("invalid encoder spec");
        let mut rng = seeded_stream(seed, stream::INIT);
        let backbone = match &spec.kind {
            EncoderKind::Mlp { input_dim, hidden } => {
                let mut layers = Vec::new();
                let mut prev = *input_dim;
                for &h in hidden {
                    layers.push(LinearParams::init(prev, h, &mut rng));
                    prev = h;
                }
                layers.push(LinearParams::init(prev, spec.feature_dim, &mut rng));
                Backbone::Mlp(layers)
            }
            EncoderKind::Cnn { in_channels, conv1_channels, .. } => Backbone::Cnn {
                conv1: ConvParams::init(*in_channels, *conv1_channels, 3, &mut rng),
                conv2: ConvParams::init(*conv1_channels, spec.feature_dim, 3, &mut rng),
            },
        };
        let classifier = LinearParams::init(spec.feature_dim, spec.num_classes, &mut rng);
        let mid = if spec.mid_branch {
            let proj = match &spec.kind {
                EncoderKind::Mlp { hidden, .. } => MidProj::Linear(LinearParams::init(
                    hidden[spec.mid_tap_layer],
                    spec.feature_dim,
                    &mut rng,
                )),
                EncoderKind::Cnn { conv1_channels, .. } => {
                    MidProj::Conv(ConvParams::init(*conv1_channels, spec.feature_dim, 1, &mut rng))
                }
            };
            Some(MidParams { proj, cls: LinearParams::init(spec.feature_dim, spec.num_classes, &mut rng) })
        } else {
            None
        };
        ModelParams { spec, backbone, classifier, mid }
    }

    /// Visits every named parameter tensor in a fixed order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Tensor)) {
        match &self.backbone {
            Backbone::Mlp(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    f(&format!("backbone.l{i}.w"), &l.w);
                    f(&format!("backbone.l{i}.b"), &l.b);
                }
            }
            Backbone::Cnn { conv1, conv2 } => {
                f("backbone.conv1.w", &conv1.w);
                f("backbone.conv1.b", &conv1.b);
                f("backbone.conv2.w", &conv2.w);
                f("backbone.conv2.b", &conv2.b);
            }
        }
        f("cls.w", &self.classifier.w);
        f("cls.b", &self.classifier.b);
        if let Some(mid) = &self.mid {
            match &mid.proj {
                MidProj::Linear(l) => {
                    f("mid.proj.w", &l.w);
                    f("mid.proj.b", &l.b);
                }
                MidProj::Conv(c) => {
                    f("mid.proj.w", &c.w);
                    f("mid.proj.b", &c.b);
                }
            }
            f("mid.cls.w", &mid.cls.w);
            f("mid.cls.b", &mid.cls.b);
        }
    }

    /// Mutable counterpart of [`ModelParams::for_each_tensor`]; same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        match &mut self.backbone {
            Backbone::Mlp(layers) => {
                for (i, l) in layers.iter_mut().enumerate() {
                    out.push((format!("backbone.l{i}.w"), &mut l.w));
                    out.push((format!("backbone.l{i}.b"), &mut l.b));
                }
            }
            Backbone::Cnn { conv1, conv2 } => {
                out.push(("backbone.conv1.w".into(), &mut conv1.w));
                out.push(("backbone.conv1.b".into(), &mut conv1.b));
                out.push(("backbone.conv2.w".into(), &mut conv2.w));
                out.push(("backbone.conv2.b".into(), &mut conv2.b));
            }
        }
        out.push(("cls.w".into(), &mut self.classifier.w));
        out.push(("cls.b".into(), &mut self.classifier.b));
        if let Some(mid) = &mut self.mid {
            match &mut mid.proj {
                MidProj::Linear(l) => {
                    out.push(("mid.proj.w".into(), &mut l.w));
                    out.push(("mid.proj.b".into(), &mut l.b));
                }
                MidProj::Conv(c) => {
                    out.push(("mid.proj.w".into(), &mut c.w));
                    out.push(("mid.proj.b".into(), &mut c.b));
                }
            }
            out.push(("mid.cls.w".into(), &mut mid.cls.w));
            out.push(("mid.cls.b".into(), &mut mid.cls.b));
        }
        out
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn register(&mut self, tape: &mut Tape) -> ModelBinding {
        self.bind(tape, true)
    }

    /// Registers parameter values as constants, for gradient-free evaluation.
    pub fn register_frozen(&self, tape: &mut Tape) -> ModelBinding {
        let mut clone = self.clone();
        clone.bind(tape, false)
    }

    fn bind(&mut self, tape: &mut Tape, differentiable: bool) -> ModelBinding {
        let mut reg = |t: &mut Tensor| -> NodeId {
            if differentiable {
                tape.leaf(t)
            } else {
                tape.constant(t.values.clone(), t.shape.clone())
            }
        };
        let backbone = match &mut self.backbone {
            Backbone::Mlp(layers) => {
                layers.iter_mut().map(|l| (reg(&mut l.w), reg(&mut l.b))).collect()
            }
            Backbone::Cnn { conv1, conv2 } => vec![
                (reg(&mut conv1.w), reg(&mut conv1.b)),
                (reg(&mut conv2.w), reg(&mut conv2.b)),
            ],
        };
        let classifier = (reg(&mut self.classifier.w), reg(&mut self.classifier.b));
        let mid = self.mid.as_mut().map(|m| {
            let proj = match &mut m.proj {
                MidProj::Linear(l) => (reg(&mut l.w), reg(&mut l.b)),
                MidProj::Conv(c) => (reg(&mut c.w), reg(&mut c.b)),
            };
            (proj, (reg(&mut m.cls.w), reg(&mut m.cls.b)))
        });
        ModelBinding { backbone, classifier, mid }
    }

    /// Copies accumulated gradients back into every parameter's grad slot.
    /// Fails if any gradient is non-finite.
    pub fn pull_grads(&mut self, tape: &Tape) -> Result<(), String> {
        for (name, t) in self.tensors_mut() {
            tape.pull_grad(t);
            if let Some(g) = &t.grad {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(format!("non-finite gradient in {name}"));
                }
            }
        }
        Ok(())
    }
}

/// Encoder forward: returns the feature node and the mid-branch tap node.
pub fn forward_features(
    tape: &mut Tape,
    spec: &EncoderSpec,
    binding: &ModelBinding,
    x: NodeId,
) -> (NodeId, NodeId) {
    match &spec.kind {
        EncoderKind::Mlp { hidden, .. } => {
            let mut h = x;
            let mut tap = x;
            for (i, &(w, b)) in binding.backbone.iter().enumerate() {
                let lin = tape.matmul(h, w);
                h = tape.add_bias(lin, b);
                let is_last = i == hidden.len();
                if !is_last || spec.rectified_features {
                    h = tape.relu(h);
                }
                if spec.mid_branch && i == spec.mid_tap_layer {
                    tap = h;
                }
            }
            (h, tap)
        }
        EncoderKind::Cnn { .. } => {
            let (w1, b1) = binding.backbone[0];
            let (w2, b2) = binding.backbone[1];
            let c1 = tape.conv2d(x, w1, 1);
            let c1 = tape.add_channel_bias(c1, b1);
            let c1 = tape.relu(c1);
            let p1 = tape.max_pool2(c1);
            let c2 = tape.conv2d(p1, w2, 1);
            let c2 = tape.add_channel_bias(c2, b2);
            let c2 = tape.relu(c2);
            let p2 = tape.max_pool2(c2);
            let z = tape.global_avg_pool(p2);
            (z, p1)
        }
    }
}

/// Main classification head: a single linear map to K logits.
pub fn forward_logits(tape: &mut Tape, binding: &ModelBinding, z: NodeId) -> NodeId {
    let (w, b) = binding.classifier;
    let lin = tape.matmul(z, w);
    tape.add_bias(lin, b)
}

/// Mid-level branch: projection → ReLU → pooling (CNN) or identity (MLP) →
/// linear classifier. With `detach` the tap is gradient-blocked, so this
/// head trains without touching the backbone.
pub fn forward_mid(
    tape: &mut Tape,
    spec: &EncoderSpec,
    binding: &ModelBinding,
    tap: NodeId,
    detach: bool,
) -> NodeId {
    let (proj, cls) = binding.mid.as_ref().expect("mid branch not enabled");
    let input = if detach { tape.stop_grad(tap) } else { tap };
    let pooled = match &spec.kind {
        EncoderKind::Mlp { .. } => {
            let lin = tape.matmul(input, proj.0);
            let lin = tape.add_bias(lin, proj.1);
            tape.relu(lin)
        }
        EncoderKind::Cnn { .. } => {
            let c = tape.conv2d(input, proj.0, 0);
            let c = tape.add_channel_bias(c, proj.1);
            let c = tape.relu(c);
            tape.global_max_pool(c)
        }
    };
    let lin = tape.matmul(pooled, cls.0);
    tape.add_bias(lin, cls.1)
}

/// Cross entropy: mean over the batch of −log softmax(p)[y].
pub fn ce_loss(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> NodeId {
    let per_sample = tape.ce_per_sample(logits, labels);
    tape.mean_vec(per_sample)
}

/// Mixup cross entropy: mean of (1−λ)·ce(p, y_a) + λ·ce(p, y_b).
pub fn ce_loss_mixed(
    tape: &mut Tape,
    logits: NodeId,
    labels_a: &[usize],
    labels_b: &[usize],
    lambda: &[f64],
) -> NodeId {
    let batch = labels_a.len();
    let per_a = tape.ce_per_sample(logits, labels_a);
    let per_b = tape.ce_per_sample(logits, labels_b);
    let wa: Vec<f64> = lambda.iter().map(|l| 1.0 - l).collect();
    let weighted_a = tape.mul_const_vec(per_a, &wa);
    let weighted_b = tape.mul_const_vec(per_b, lambda);
    let combined = tape.add(weighted_a, weighted_b);
    let total = tape.sum_all(combined);
    tape.scale(total, 1.0 / batch as f64)
}

/// Max-subtracted softmax of one logit row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Argmax with ties broken toward the lowest class id.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Single-head predictions from raw logits.
pub fn predict_single(logits: &[f64], num_classes: usize) -> Vec<usize> {
    logits.chunks(num_classes).map(argmax).collect()
}

/// Two-head ensemble: argmax of the mean of the two softmax probability
/// vectors, ties toward the lowest class id.
pub fn predict_ensemble(
    logits_main: &[f64],
    logits_mid: &[f64],
    num_classes: usize,
) -> Vec<usize> {
    assert_eq!(logits_main.len(), logits_mid.len(), "heads must share a shape");
    logits_main
        .chunks(num_classes)
        .zip(logits_mid.chunks(num_classes))
        .map(|(a, b)| {
            let pa = softmax_row(a);
            let pb = softmax_row(b);
            let mean: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| 0.5 * (x + y)).collect();
            argmax(&mean)
        })
        .collect()
}

// ── Checkpoint format ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointArray {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    magic: String,
    spec: EncoderSpec,
    arrays: Vec<CheckpointArray>,
}

/// Serializes all parameters as a JSON container of named arrays.
pub fn save_checkpoint(params: &ModelParams, w: &mut impl Write) -> std::io::Result<()> {
    let mut arrays = Vec::new();
    params.for_each_tensor(|name, t| {
        arrays.push(CheckpointArray {
            name: name.to_string(),
            shape: t.shape.clone(),
            values: t.values.clone(),
        });
    });
    let file = CheckpointFile { magic: CHECKPOINT_MAGIC.into(), spec: params.spec.clone(), arrays };
    serde_json::to_writer(w, &file).map_err(std::io::Error::other)
}

/// Reads a checkpoint back; the magic string and every array shape are
/// validated against a freshly built model of the stored spec.
pub fn load_checkpoint(r: &mut impl Read) -> Result<ModelParams, String> {
    let file: CheckpointFile =
        serde_json::from_reader(r).map_err(|e| format!("malformed checkpoint: {e}"))?;
    if file.magic != CHECKPOINT_MAGIC {
        return Err(format!("bad checkpoint magic {:?}", file.magic));
    }
    let mut params = ModelParams::init(file.spec, 0);
    let mut by_name: std::collections::BTreeMap<String, CheckpointArray> =
        file.arrays.into_iter().map(|a| (a.name.clone(), a)).collect();
    let mut err = None;
    for (name, t) in params.tensors_mut() {
        match by_name.remove(&name) {
            Some(a) if a.shape == t.shape => {
                t.values = a.values;
                t.grad = None;
                t.node_id = None;
            }
            Some(a) => {
                err = Some(format!("array {name}: shape {:?} does not match {:?}", a.shape, t.shape))
            }
            None => err = Some(format!("checkpoint missing array {name}")),
        }
        if err.is_some() {
            break;
        }
    }
    if let Some(e) = err {
        return Err(e);
    }
    if !by_name.is_empty() {
        return Err(format!("checkpoint has unexpected arrays: {:?}", by_name.keys()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mlp_spec(input: usize, hidden: Vec<usize>, d: usize, k: usize) -> EncoderSpec {
        EncoderSpec {
            kind: EncoderKind::Mlp { input_dim: input, hidden },
            feature_dim: d,
            num_classes: k,
            mid_branch: false,
            mid_tap_layer: 0,
            rectified_features: false,
        }
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let spec = mlp_spec(4, vec![5], 3, 2);
        let mut params = ModelParams::init(spec.clone(), 1);
        for (_, t) in params.tensors_mut() {
            t.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let binding = params.register(&mut tape);
        let x = tape.constant(vec![1.0, -2.0, 0.5, 3.0], vec![1, 4]);
        let (z, _) = forward_features(&mut tape, &spec, &binding, x);
        assert!(tape.values(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_matches_matmul() {
        // No hidden layers: z = xW + b directly.
        let spec = mlp_spec(3, vec![], 2, 2);
        let mut params = ModelParams::init(spec.clone(), 3);
        let mut tape = Tape::new();
        let binding = params.register(&mut tape);
        let xv = vec![0.5, -1.0, 2.0];
        let x = tape.constant(xv.clone(), vec![1, 3]);
        let (z, _) = forward_features(&mut tape, &spec, &binding, x);

        let Backbone::Mlp(layers) = &params.backbone else { unreachable!() };
        let w = &layers[0].w.values;
        let mut want = vec![0.0; 2];
        for j in 0..2 {
            for p in 0..3 {
                want[j] += xv[p] * w[p * 2 + j];
            }
        }
        for (a, b) in tape.values(z).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_of_two_equals_stacked_singles() {
        let spec = mlp_spec(4, vec![6, 5], 3, 2);
        let mut params = ModelParams::init(spec.clone(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xa: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xb: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

        let run = |params: &mut ModelParams, vals: Vec<f64>, rows: usize| -> Vec<f64> {
            let mut tape = Tape::new();
            let binding = params.register(&mut tape);
            let x = tape.constant(vals, vec![rows, 4]);
            let (z, _) = forward_features(&mut tape, &spec, &binding, x);
            tape.values(z).to_vec()
        };
        let za = run(&mut params, xa.clone(), 1);
        let zb = run(&mut params, xb.clone(), 1);
        let zboth = run(&mut params, [xa, xb].concat(), 2);
        assert_eq!(zboth, [za, zb].concat());
    }

    #[test]
    fn identity_classifier_passes_features_through() {
        let spec = mlp_spec(2, vec![], 3, 3);
        let mut params = ModelParams::init(spec.clone(), 1);
        params.classifier.w.values = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        params.classifier.b.values = vec![0.0; 3];
        let mut tape = Tape::new();
        let binding = params.register(&mut tape);
        let z = tape.constant(vec![0.3, -0.7, 1.1], vec![1, 3]);
        let p = forward_logits(&mut tape, &binding, z);
        assert_eq!(tape.values(p), &[0.3, -0.7, 1.1]);
    }

    #[test]
    fn zero_features_give_replicated_bias() {
        let spec = mlp_spec(2, vec![], 3, 2);
        let mut params = ModelParams::init(spec.clone(), 1);
        params.classifier.b.values = vec![0.25, -0.5];
        let mut tape = Tape::new();
        let binding = params.register(&mut tape);
        let z = tape.constant(vec![0.0; 6], vec![2, 3]);
        let p = forward_logits(&mut tape, &binding, z);
        assert_eq!(tape.values(p), &[0.25, -0.5, 0.25, -0.5]);
    }

    #[test]
    fn ce_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![0.0; 4], vec![1, 4]);
        let loss = ce_loss(&mut tape, logits, &[2]);
        assert!((tape.scalar(loss) - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn ce_saturated_correct_logit_is_tiny() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![0.0, 50.0, 0.0], vec![1, 3]);
        let loss = ce_loss(&mut tape, logits, &[1]);
        assert!(tape.scalar(loss) < 1e-9);
    }

    #[test]
    fn ce_matches_direct_softmax_log_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (m, k) = (5, 7);
        let logits: Vec<f64> = (0..m * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let mut tape = Tape::new();
        let ln = tape.constant(logits.clone(), vec![m, k]);
        let loss = ce_loss(&mut tape, ln, &labels);

        let mut want = 0.0;
        for i in 0..m {
            let p = softmax_row(&logits[i * k..(i + 1) * k]);
            want += -p[labels[i]].ln();
        }
        want /= m as f64;
        assert!((tape.scalar(loss) - want).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn ce_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![0.0; 3], vec![1, 3]);
        ce_loss(&mut tape, logits, &[3]);
    }

    #[test]
    fn ensemble_equal_heads_matches_single() {
        let logits = vec![0.1, 2.0, -1.0, 3.0, 0.0, 0.5];
        let single = predict_single(&logits, 3);
        let ens = predict_ensemble(&logits, &logits, 3);
        assert_eq!(single, ens);
        assert_eq!(ens, vec![1, 0]);
    }

    #[test]
    fn ensemble_tie_breaks_to_lowest_class() {
        // Heads disagree symmetrically: mean probabilities tie exactly.
        let main = vec![1.0, 0.0];
        let mid = vec![0.0, 1.0];
        assert_eq!(predict_ensemble(&main, &mid, 2), vec![0]);
    }

    #[test]
    fn ensemble_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let (m, k) = (20, 6);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = predict_ensemble(&a, &b, k);
        for i in 0..m {
            let pa = softmax_row(&a[i * k..(i + 1) * k]);
            let pb = softmax_row(&b[i * k..(i + 1) * k]);
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for j in 0..k {
                let v = 0.5 * (pa[j] + pb[j]);
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            assert_eq!(got[i], best);
        }
    }

    #[test]
    fn ensemble_invariant_to_per_sample_logit_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (m, k) = (8, 5);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut shifted = a.clone();
        for i in 0..m {
            let c: f64 = rng.random_range(-5.0..5.0);
            for j in 0..k {
                shifted[i * k + j] += c;
            }
        }
        assert_eq!(predict_ensemble(&a, &b, k), predict_ensemble(&shifted, &b, k));
    }

    #[test]
    fn mid_branch_detached_leaves_backbone_gradient_free() {
        let mut spec = mlp_spec(4, vec![6, 5], 3, 2);
        spec.mid_branch = true;
        spec.mid_tap_layer = 0;
        let mut params = ModelParams::init(spec.clone(), 5);
        let mut tape = Tape::new();
        let binding = params.register(&mut tape);
        let x = tape.constant(vec![0.5, 1.0, -0.5, 0.25, 1.5, -1.0, 0.75, 0.1], vec![2, 4]);
        let (_, tap) = forward_features(&mut tape, &spec, &binding, x);
        let p_mid = forward_mid(&mut tape, &spec, &binding, tap, true);
        let loss = ce_loss(&mut tape, p_mid, &[0, 1]);
        tape.backward(loss);
        params.pull_grads(&tape).unwrap();
        params.for_each_tensor(|name, t| {
            let g = t.grad.as_ref().unwrap();
            if name.starts_with("backbone") || name.starts_with("cls") {
                assert!(g.iter().all(|&v| v == 0.0), "{name} received gradient");
            }
        });
        // The mid classifier itself must still learn.
        let mid_cls_grad = &params.mid.as_ref().unwrap().cls.w.grad;
        assert!(mid_cls_grad.as_ref().unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn mid_branch_without_detach_reaches_backbone() {
        let mut spec = mlp_spec(4, vec![6, 5], 3, 2);
        spec.mid_branch = true;
        let mut params = ModelParams::init(spec.clone(), 5);
        let mut tape = Tape::new();
        let binding = params.register(&mut tape);
        let x = tape.constant(vec![0.5, 1.0, -0.5, 0.25, 1.5, -1.0, 0.75, 0.1], vec![2, 4]);
        let (_, tap) = forward_features(&mut tape, &spec, &binding, x);
        let p_mid = forward_mid(&mut tape, &spec, &binding, tap, false);
        let loss = ce_loss(&mut tape, p_mid, &[0, 1]);
        tape.backward(loss);
        params.pull_grads(&tape).unwrap();
        let Backbone::Mlp(layers) = &params.backbone else { unreachable!() };
        let g0 = layers[0].w.grad.as_ref().unwrap();
        assert!(g0.iter().any(|&v| v != 0.0), "undetached mid loss must reach layer 0");
    }

    #[test]
    fn mid_zero_weights_give_bias_logits() {
        let mut spec = mlp_spec(3, vec![4], 2, 2);
        spec.mid_branch = true;
        let mut params = ModelParams::init(spec.clone(), 2);
        if let Some(m) = &mut params.mid {
            if let MidProj::Linear(l) = &mut m.proj {
                l.w.values.iter_mut().for_each(|v| *v = 0.0);
                l.b.values.iter_mut().for_each(|v| *v = 0.0);
            }
            m.cls.w.values.iter_mut().for_each(|v| *v = 0.0);
            m.cls.b.values = vec![0.5, -0.25];
        }
        let mut tape = Tape::new();
        let binding = params.register(&mut tape);
        let x = tape.constant(vec![1.0, 2.0, 3.0], vec![1, 3]);
        let (_, tap) = forward_features(&mut tape, &spec, &binding, x);
        let p_mid = forward_mid(&mut tape, &spec, &binding, tap, true);
        assert_eq!(tape.values(p_mid), &[0.5, -0.25]);
    }

    #[test]
    fn cnn_forward_shapes_and_mid() {
        let spec = EncoderSpec {
            kind: EncoderKind::Cnn { in_channels: 1, height: 8, width: 8, conv1_channels: 3 },
            feature_dim: 4,
            num_classes: 2,
            mid_branch: true,
            mid_tap_layer: 0,
            rectified_features: true,
        };
        let mut params = ModelParams::init(spec.clone(), 11);
        let mut tape = Tape::new();
        let binding = params.register(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let xv: Vec<f64> = (0..2 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = tape.constant(xv, vec![2, 1, 8, 8]);
        let (z, tap) = forward_features(&mut tape, &spec, &binding, x);
        assert_eq!(tape.shape(z), &[2, 4]);
        assert_eq!(tape.shape(tap), &[2, 3, 4, 4]);
        let logits = forward_logits(&mut tape, &binding, z);
        assert_eq!(tape.shape(logits), &[2, 2]);
        let p_mid = forward_mid(&mut tape, &spec, &binding, tap, true);
        assert_eq!(tape.shape(p_mid), &[2, 2]);
    }

    #[test]
    fn checkpoint_round_trips() {
        let mut spec = mlp_spec(4, vec![5], 3, 2);
        spec.mid_branch = true;
        let params = ModelParams::init(spec, 9);
        let mut buf = Vec::new();
        save_checkpoint(&params, &mut buf).unwrap();
        let loaded = load_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.spec, params.spec);
        let mut pairs = Vec::new();
        params.for_each_tensor(|name, t| pairs.push((name.to_string(), t.values.clone())));
        loaded.for_each_tensor(|name, t| {
            let (want_name, want_vals) = pairs.remove(0);
            assert_eq!(name, want_name);
            assert_eq!(t.values, want_vals);
        });
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let params = ModelParams::init(mlp_spec(2, vec![], 2, 2), 0);
        let mut buf = Vec::new();
        save_checkpoint(&params, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace(CHECKPOINT_MAGIC, "NOPE-0");
        let err = load_checkpoint(&mut text.as_bytes()).unwrap_err();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn spec_validation_catches_bad_tap() {
        let mut spec = mlp_spec(4, vec![5], 3, 2);
        spec.mid_branch = true;
        spec.mid_tap_layer = 1;
        assert!(spec.validate().is_err());
    }
}
