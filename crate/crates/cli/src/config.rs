//! JSON run configuration and its resolution into trainer inputs.
//!
//! Unknown keys are rejected everywhere so a misspelled hyperparameter
//! fails loudly instead of silently training with a default.

use anyhow::{bail, Context, Result};
use dtrg_core::augment::AugmentMode;
use dtrg_core::data::{self, Dataset};
use dtrg_core::model::{EncoderKind, EncoderSpec};
use dtrg_core::trainer::{GslVariant, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub seed: u64,
    #[serde(default = "d_epochs")]
    pub epochs: u32,
    /// T_th: epochs strictly below it use cross entropy only.
    #[serde(default = "d_warmup")]
    pub warmup: u32,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default = "d_milestones")]
    pub milestones: Vec<u32>,
    #[serde(default = "d_decay")]
    pub lr_decay: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_eta")]
    pub eta: f64,
    /// Defaults to 1 for the vanilla encoder and 2 with the mid branch.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "d_gsl")]
    pub gsl_variant: GslVariant,
    #[serde(default = "d_augment")]
    pub augment: AugmentMode,
    /// Defaults to 0.1 for mixup and 1.0 for cutmix.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub mid_branch: bool,
    #[serde(default = "d_true")]
    pub detach_mid: bool,
    #[serde(default)]
    pub lambda_override: Option<f64>,
    /// Write per-epoch center matrices to centers.csv.
    #[serde(default)]
    pub dump_centers: bool,
    /// Write per-epoch target graphs to graph.csv.
    #[serde(default)]
    pub dump_graph: bool,
    /// Per-class sparsification of the training split (keep fraction).
    #[serde(default)]
    pub sparsify_keep: Option<f64>,
    /// Step-imbalance minority fraction applied to the training split.
    #[serde(default)]
    pub imbalance_minority: Option<f64>,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub dataset: DatasetSpec,
}

fn d_epochs() -> u32 {
    100
}
fn d_warmup() -> u32 {
    2
}
fn d_batch() -> usize {
    16
}
fn d_lr0() -> f64 {
    0.01
}
fn d_milestones() -> Vec<u32> {
    vec![40, 70]
}
fn d_decay() -> f64 {
    0.1
}
fn d_momentum() -> f64 {
    0.9
}
fn d_wd() -> f64 {
    1e-4
}
fn d_beta() -> f64 {
    1e-3
}
fn d_eta() -> f64 {
    1.0
}
fn d_gsl() -> GslVariant {
    GslVariant::Euclidean
}
fn d_augment() -> AugmentMode {
    AugmentMode::None
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
#[serde(tag = "kind")]
pub enum ModelSpec {
    Mlp {
        #[serde(default = "d_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "d_feature_dim")]
        feature_dim: usize,
        #[serde(default)]
        mid_tap_layer: usize,
        #[serde(default = "d_true")]
        rectified_features: bool,
    },
    Cnn {
        #[serde(default = "d_conv1")]
        conv1_channels: usize,
        #[serde(default = "d_feature_dim")]
        feature_dim: usize,
    },
}

fn d_hidden() -> Vec<usize> {
    vec![256, 128]
}
fn d_feature_dim() -> usize {
    64
}
fn d_conv1() -> usize {
    8
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Mlp {
            hidden: d_hidden(),
            feature_dim: d_feature_dim(),
            mid_tap_layer: 0,
            rectified_features: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
#[serde(tag = "kind")]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "ds_classes")]
        classes: usize,
        #[serde(default = "ds_superclasses")]
        superclasses: usize,
        #[serde(default = "ds_input_dim")]
        input_dim: usize,
        #[serde(default = "ds_per_class")]
        per_class: usize,
        #[serde(default = "ds_within")]
        within_spread: f64,
        #[serde(default = "ds_between")]
        between_spread: f64,
        #[serde(default = "ds_seed")]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
    },
}

fn ds_classes() -> usize {
    20
}
fn ds_superclasses() -> usize {
    4
}
fn ds_input_dim() -> usize {
    32
}
fn ds_per_class() -> usize {
    30
}
fn ds_within() -> f64 {
    0.4
}
fn ds_between() -> f64 {
    1.0
}
fn ds_seed() -> u64 {
    7
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            classes: ds_classes(),
            superclasses: ds_superclasses(),
            input_dim: ds_input_dim(),
            per_class: ds_per_class(),
            within_spread: ds_within(),
            between_spread: ds_between(),
            seed: ds_seed(),
        }
    }
}

impl RunSpec {
    pub fn from_file(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let spec: RunSpec = serde_json::from_slice(&bytes)
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok((spec, bytes))
    }

    pub fn resolved_tau(&self) -> f64 {
        self.tau.unwrap_or(if self.mid_branch { 2.0 } else { 1.0 })
    }

    pub fn resolved_alpha(&self) -> f64 {
        self.alpha.unwrap_or(match self.augment {
            AugmentMode::Cutmix => 1.0,
            _ => 0.1,
        })
    }

    /// Trainer hyperparameters with all defaults resolved.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            warmup_epochs: self.warmup,
            batch_size: self.batch_size,
            lr0: self.lr0,
            milestones: self.milestones.clone(),
            lr_decay: self.lr_decay,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            beta: self.beta,
            eta: self.eta,
            tau: self.resolved_tau(),
            gsl_variant: self.gsl_variant,
            augment: self.augment,
            alpha: self.resolved_alpha(),
            mid_branch: self.mid_branch,
            detach_mid: self.detach_mid,
            seed: self.seed,
            lambda_override: self.lambda_override,
            log_features: false,
            log_graphs: self.dump_centers || self.dump_graph,
        }
    }

    /// Builds the encoder description for a dataset's input shape.
    pub fn encoder(&self, dataset: &Dataset) -> Result<EncoderSpec> {
        let spec = match (&self.model, dataset.input_shape.as_slice()) {
            (ModelSpec::Mlp { hidden, feature_dim, mid_tap_layer, rectified_features }, shape) => {
                let input_dim: usize = shape.iter().product();
                EncoderSpec {
                    kind: EncoderKind::Mlp { input_dim, hidden: hidden.clone() },
                    feature_dim: *feature_dim,
                    num_classes: dataset.num_classes,
                    mid_branch: self.mid_branch,
                    mid_tap_layer: *mid_tap_layer,
                    rectified_features: *rectified_features,
                }
            }
            (ModelSpec::Cnn { conv1_channels, feature_dim }, [c, h, w]) => EncoderSpec {
                kind: EncoderKind::Cnn {
                    in_channels: *c,
                    height: *h,
                    width: *w,
                    conv1_channels: *conv1_channels,
                },
                feature_dim: *feature_dim,
                num_classes: dataset.num_classes,
                mid_branch: self.mid_branch,
                mid_tap_layer: 0,
                rectified_features: true,
            },
            (ModelSpec::Cnn { .. }, shape) => {
                bail!("model: cnn requires [C, H, W] inputs, dataset provides {shape:?}")
            }
        };
        spec.validate().map_err(|e| anyhow::anyhow!("model: {e}"))?;
        Ok(spec)
    }

    /// Loads or generates the dataset pair and applies any corpus
    /// transforms to the training split. The test split is never touched.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let (mut train, test) = match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                superclasses,
                input_dim,
                per_class,
                within_spread,
                between_spread,
                seed,
            } => data::gen_synthetic(
                *classes,
                *superclasses,
                *input_dim,
                *per_class,
                *within_spread,
                *between_spread,
                *seed,
            )
            .map_err(|e| anyhow::anyhow!("dataset: {e}"))?,
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels } => {
                let mut train = data::load_idx(train_images, train_labels)
                    .map_err(|e| anyhow::anyhow!("dataset.train: {e}"))?;
                let mut test = data::load_idx(test_images, test_labels)
                    .map_err(|e| anyhow::anyhow!("dataset.test: {e}"))?;
                test.split = data::Split::Test;
                let k = train.num_classes.max(test.num_classes);
                train.num_classes = k;
                test.num_classes = k;
                (train, test)
            }
            DatasetSpec::Csv { train, test } => {
                let mut train_set = data::load_csv_features(train)
                    .map_err(|e| anyhow::anyhow!("dataset.train: {e}"))?;
                let mut test_set = data::load_csv_features(test)
                    .map_err(|e| anyhow::anyhow!("dataset.test: {e}"))?;
                if train_set.input_shape != test_set.input_shape {
                    bail!(
                        "dataset: train width {:?} does not match test width {:?}",
                        train_set.input_shape,
                        test_set.input_shape
                    );
                }
                test_set.split = data::Split::Test;
                let k = train_set.num_classes.max(test_set.num_classes);
                train_set.num_classes = k;
                test_set.num_classes = k;
                (train_set, test_set)
            }
        };
        if let Some(keep) = self.sparsify_keep {
            if !(keep > 0.0 && keep <= 1.0) {
                bail!("sparsify_keep: must be in (0, 1], got {keep}");
            }
            train = data::sparsify(&train, keep, self.seed);
        }
        if let Some(minority) = self.imbalance_minority {
            if !(0.0..=1.0).contains(&minority) {
                bail!("imbalance_minority: must be in [0, 1], got {minority}");
            }
            train = data::step_imbalance(&train, minority, self.seed);
        }
        Ok((train, test))
    }

    /// Full semantic validation, with the offending field in the message.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate().map_err(|e| anyhow::anyhow!(e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let spec: RunSpec = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(spec.epochs, 100);
        assert_eq!(spec.milestones, vec![40, 70]);
        assert_eq!(spec.resolved_tau(), 1.0);
        assert!((spec.resolved_alpha() - 0.1).abs() < 1e-12);
        spec.validate().unwrap();
    }

    #[test]
    fn missing_seed_is_named() {
        let err = serde_json::from_str::<RunSpec>("{}").unwrap_err().to_string();
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = serde_json::from_str::<RunSpec>(r#"{"seed":1,"learning_rate":0.1}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn tau_defaults_to_two_with_mid_branch() {
        let spec: RunSpec =
            serde_json::from_str(r#"{"seed": 1, "mid_branch": true}"#).unwrap();
        assert_eq!(spec.resolved_tau(), 2.0);
    }

    #[test]
    fn cutmix_alpha_default_is_one() {
        let spec: RunSpec =
            serde_json::from_str(r#"{"seed": 1, "augment": "cutmix"}"#).unwrap();
        assert_eq!(spec.resolved_alpha(), 1.0);
    }

    #[test]
    fn synthetic_dataset_resolves() {
        let spec: RunSpec = serde_json::from_str(r#"{"seed": 5}"#).unwrap();
        let (train, test) = spec.datasets().unwrap();
        assert_eq!(train.num_classes, 20);
        assert_eq!(train.len(), 600);
        assert_eq!(test.len(), 160);
        let encoder = spec.encoder(&train).unwrap();
        assert_eq!(encoder.num_classes, 20);
        assert_eq!(encoder.feature_dim, 64);
    }

    #[test]
    fn transforms_apply_to_train_only() {
        let spec: RunSpec =
            serde_json::from_str(r#"{"seed": 5, "sparsify_keep": 0.1}"#).unwrap();
        let (train, test) = spec.datasets().unwrap();
        assert_eq!(train.len(), 20 * 3);
        assert_eq!(test.len(), 160, "test split must stay untouched");
    }
}
