//! Dynamic target relation graph (DTRG) regularization for classification,
//! at desk scale: a reverse-mode autodiff core, a small encoder/classifier
//! model, non-parametric online class centers, exp-cosine relation graphs
//! with Euclidean and KL graph-similarity losses, mixup-style inter-class
//! relation augmentation, dataset generators and corpus transforms, and the
//! full training loop.

pub mod augment;
pub mod centers;
pub mod data;
pub mod diffcore;
pub mod model;
pub mod relgraph;
pub mod trainer;
pub mod util;
pub mod verify;

pub use diffcore::{grad_check, NodeId, Tape, Tensor};
pub use trainer::{train, EpochMetrics, TrainConfig, TrainOutcome};
