//! Randomized invariant checks.

use dtrg_core::augment::{mixup, sample_lambda};
use dtrg_core::centers::CenterState;
use dtrg_core::data::{gen_synthetic, sparsify, step_imbalance};
use dtrg_core::relgraph::{build_target_graph_raw, cos_sim, sample_graph, NORM_EPS};
use dtrg_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lambda_always_in_unit_interval(alpha in 0.01f64..8.0, seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let lam = sample_lambda(alpha, &mut rng);
        prop_assert!((0.0..=1.0).contains(&lam), "lambda {lam}");
    }

    #[test]
    fn cosine_stays_bounded(a in prop::collection::vec(-3.0f64..3.0, 4), b in prop::collection::vec(-3.0f64..3.0, 4)) {
        let c = cos_sim(&a, &b, NORM_EPS);
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn mixup_of_x_with_itself_is_x(lam in 0.0f64..=1.0, x in prop::collection::vec(-5.0f64..5.0, 6)) {
        let out = mixup(&x, &x, lam);
        for (o, v) in out.iter().zip(&x) {
            prop_assert!((o - v).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_seed_doubling_is_exact(seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(vec![3, 4], 0.8, &mut rng);
        let w = Tensor::randn(vec![4, 2], 0.8, &mut rng);
        let grads = |seed_value: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut xt = x.clone();
            let mut wt = w.clone();
            let xn = tape.leaf(&mut xt);
            let wn = tape.leaf(&mut wt);
            let h = tape.matmul(xn, wn);
            let r = tape.relu(h);
            let e = tape.exp(r);
            let loss = tape.sum_all(e);
            tape.backward_seeded(loss, seed_value);
            let mut g = tape.grad(xn).to_vec();
            g.extend_from_slice(tape.grad(wn));
            g
        };
        let g1 = grads(1.0);
        let g2 = grads(2.0);
        for (a, b) in g1.iter().zip(&g2) {
            prop_assert_eq!((2.0 * a).to_bits(), b.to_bits());
        }
    }

    #[test]
    fn graph_entries_bounded_for_random_centers(seed in any::<u64>(), tau in 0.5f64..4.0) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let k = 5;
        let d = 6;
        let c = Tensor::randn(vec![k, d], 1.0, &mut rng).values;
        let g = build_target_graph_raw(&c, k, d, tau, 0);
        let (lo, hi) = ((-1.0f64 / tau).exp(), (1.0f64 / tau).exp());
        for &v in &g.g {
            prop_assert!(v >= lo && v <= hi);
        }
        for row in 0..k {
            let s: f64 = g.row_hat(row).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sample_rows_are_distributions(seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut state = CenterState::init(4, 5, 1);
        state.c = Tensor::randn(vec![4, 5], 1.0, &mut rng).values;
        let z = Tensor::randn(vec![3, 5], 1.5, &mut rng);
        let mut tape = Tape::new();
        let zn = tape.constant(z.values, vec![3, 5]);
        let sg = sample_graph(&mut tape, zn, &state, 1.0);
        for row in tape.values(sg.s_hat).chunks(4) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn corpus_transforms_preserve_classes(frac in 0.01f64..1.0, mfrac in 0.0f64..=1.0, seed in any::<u64>()) {
        let (train, _) = gen_synthetic(6, 2, 4, 5, 0.3, 1.0, seed % 1000).unwrap();
        let sparse = sparsify(&train, frac, seed);
        prop_assert_eq!(sparse.num_classes, 6);
        prop_assert!(sparse.class_counts().iter().all(|&c| c >= 1));
        let imb = step_imbalance(&train, mfrac, seed);
        prop_assert_eq!(imb.num_classes, 6);
        prop_assert!(imb.class_counts().iter().all(|&c| c >= 1));
    }
}
