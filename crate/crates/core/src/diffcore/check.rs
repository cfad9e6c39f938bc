use super::tape::{NodeId, Tape};
use super::Tensor;

/// Compares the tape's analytic gradients against central finite
/// differences and returns the worst relative error over all parameter
/// entries, using |a−n| / max(|a|, |n|, 1e-8).
///
/// `build` must construct the scalar loss from the registered leaves; it is
/// re-invoked on a fresh tape for every perturbed evaluation, so it has to
/// be a pure function of the parameter values. Panics if any evaluation is
/// non-finite.
pub fn grad_check<F>(build: F, params: &[Tensor], h: f64) -> f64
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    assert!(h > 0.0 && h <= 1e-2, "step size must be in (0, 1e-2], got {h}");

    let eval = |values: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params
            .iter()
            .zip(values)
            .map(|(p, v)| {
                let mut t = Tensor::param(p.shape.clone(), v.clone());
                tape.leaf(&mut t)
            })
            .collect();
        let loss = build(&mut tape, &ids);
        let v = tape.scalar(loss);
        assert!(v.is_finite(), "loss evaluated to a non-finite value");
        v
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let mut leaves = Vec::with_capacity(params.len());
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| {
            let mut t = Tensor::param(p.shape.clone(), p.values.clone());
            let id = tape.leaf(&mut t);
            leaves.push(t);
            id
        })
        .collect();
    let loss = build(&mut tape, &ids);
    assert!(tape.scalar(loss).is_finite(), "loss evaluated to a non-finite value");
    tape.backward(loss);
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();

    let base: Vec<Vec<f64>> = params.iter().map(|p| p.values.clone()).collect();
    let mut max_rel = 0.0f64;
    for pi in 0..params.len() {
        for ei in 0..base[pi].len() {
            let mut plus = base.clone();
            plus[pi][ei] += h;
            let mut minus = base.clone();
            minus[pi][ei] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[pi][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}
