//! Dense tensors and reverse-mode automatic differentiation.
//!
//! The tape is define-by-run: every forward pass records its operations on a
//! fresh [`Tape`], and one call to [`Tape::backward`] fills the gradient of
//! every `requires_grad` leaf. Everything is double precision.

mod check;
mod tape;

pub use check::grad_check;
pub use tape::{NodeId, Tape};

use rand::Rng;
use rand_distr::StandardNormal;

/// Dense row-major tensor with an optional gradient slot.
///
/// A `Tensor` is a plain value holder; computation happens on a [`Tape`].
/// Registering a tensor as a leaf stores the tape handle in `node_id`, and
/// [`Tape::pull_grad`] copies the accumulated gradient back into `grad`.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub node_id: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, values.len(), "shape {:?} does not match {} values", shape, values.len());
        Tensor { shape, values, requires_grad: false, grad: None, node_id: None }
    }

    /// Leaf tensor that participates in backward passes.
    pub fn param(shape: Vec<usize>, values: Vec<f64>) -> Self {
        let mut t = Tensor::new(shape, values);
        t.requires_grad = true;
        t
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    /// Gaussian-initialized parameter with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::param(shape, values)
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
