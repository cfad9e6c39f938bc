//! Mixup-style input interpolation for inter-class relation augmentation.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

/// How a batch was interpolated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    None,
    Mixup,
    Cutmix,
}

/// An interpolated batch with its two source label sets and per-sample
/// mixing coefficients. `mode == None` means `lambda` is all zero and
/// `labels_b == labels_a`.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    pub inputs: Vec<f64>,
    pub input_shape: Vec<usize>,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
    pub lambda: Vec<f64>,
    pub mode: AugmentMode,
}

impl MixedBatch {
    /// Wraps an unmixed batch in the degenerate record.
    pub fn plain(inputs: Vec<f64>, input_shape: Vec<usize>, labels: Vec<usize>) -> Self {
        let lambda = vec![0.0; labels.len()];
        MixedBatch {
            inputs,
            input_shape,
            labels_b: labels.clone(),
            labels_a: labels,
            lambda,
            mode: AugmentMode::None,
        }
    }

    pub fn is_mixed(&self) -> bool {
        self.mode != AugmentMode::None
    }
}

/// One draw from Beta(α, α) via two Gamma(α, 1) draws, λ = g₁/(g₁+g₂).
pub fn sample_lambda(alpha: f64, rng: &mut impl Rng) -> f64 {
    assert!(alpha > 0.0, "alpha must be positive, got {alpha}");
    let gamma = Gamma::new(alpha, 1.0).expect("valid gamma shape");
    let g1: f64 = gamma.sample(rng);
    let g2: f64 = gamma.sample(rng);
    let lam = g1 / (g1 + g2);
    // Both draws can underflow to zero for very small alpha.
    if lam.is_finite() {
        lam
    } else {
        0.5
    }
}

/// x̃ = (1−λ)·x_a + λ·x_b.
pub fn mixup(x_a: &[f64], x_b: &[f64], lambda: f64) -> Vec<f64> {
    assert_eq!(x_a.len(), x_b.len(), "mixup inputs must share a shape");
    x_a.iter().zip(x_b).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect()
}

/// Box pasted by cutmix, in pixel coordinates (rows y0..y1, cols x0..x1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

/// Pastes a random box from `x_b` into `x_a`. The box targets an area
/// fraction of `lambda_raw` with the image's own aspect ratio; clipping at
/// the borders can shrink it, so the returned coefficient is the actual
/// pasted-area fraction.
///
/// Inputs are single images in channel-first [C, H, W] layout.
pub fn cutmix(
    x_a: &[f64],
    x_b: &[f64],
    shape: &[usize],
    lambda_raw: f64,
    rng: &mut impl Rng,
) -> (Vec<f64>, f64, CutBox) {
    assert_eq!(shape.len(), 3, "cutmix requires [C, H, W] image inputs");
    assert!((0.0..=1.0).contains(&lambda_raw), "lambda_raw outside [0,1]");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert_eq!(x_a.len(), c * h * w);
    assert_eq!(x_b.len(), x_a.len());

    let box_h = ((h as f64) * lambda_raw.sqrt()).round() as usize;
    let box_w = ((w as f64) * lambda_raw.sqrt()).round() as usize;
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    let bx = CutBox {
        y0: cy.saturating_sub(box_h / 2),
        y1: (cy + box_h.div_ceil(2)).min(h),
        x0: cx.saturating_sub(box_w / 2),
        x1: (cx + box_w.div_ceil(2)).min(w),
    };

    let mut out = x_a.to_vec();
    for ci in 0..c {
        for y in bx.y0..bx.y1 {
            for x in bx.x0..bx.x1 {
                out[(ci * h + y) * w + x] = x_b[(ci * h + y) * w + x];
            }
        }
    }
    let lambda_adjusted = bx.area() as f64 / (h * w) as f64;
    (out, lambda_adjusted, bx)
}
