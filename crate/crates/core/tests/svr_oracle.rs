//! SVR against an independent projected-gradient solve of the same dual.

use helios_core::svr::{svr_fit, DualProblem, Kernel, SvrSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "common/svr_reference.rs"]
mod svr_reference;
use svr_reference::{random_instance, reference_objective, specs};

#[test]
fn objective_matches_reference_solver_on_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for n in 2..=12 {
        for spec in specs() {
            let (x, y) = random_instance(&mut rng, n, 1 + n % 3);
            let (_, rep) = svr_fit(&x, &y, &spec).unwrap();
            let prob = DualProblem::build(&x, &y, &spec).unwrap();
            let reference = reference_objective(&prob, &spec);
            let rel = (rep.objective - reference).abs() / reference.abs().max(1e-12);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "n={n} {spec:?}: smo {} reference {reference}", rep.objective);
        }
    }
    println!("worst relative objective gap {worst:.2e}");
}

#[test]
fn dual_bounds_and_bias_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [5, 20, 60] {
        for spec in specs() {
            let (x, y) = random_instance(&mut rng, n, 3);
            let (m, rep) = svr_fit(&x, &y, &spec).unwrap();
            assert!(m.coef.iter().all(|c| c.abs() <= spec.c + 1e-9));
            for b in &rep.free_bias_estimates {
                assert!((b - rep.bias).abs() <= 10.0 * spec.tol, "{b} vs {}", rep.bias);
            }
        }
    }
}

#[test]
fn free_vectors_sit_on_the_tube_edge() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (x, y) = random_instance(&mut rng, 40, 2);
    let spec = SvrSpec::default();
    let (m, _) = svr_fit(&x, &y, &spec).unwrap();
    let st = &m.standardizer;
    for (sv, c) in m.support.iter().zip(&m.coef) {
        if c.abs() < spec.c * (1.0 - 1e-6) {
            let raw = st.invert(sv);
            let i = x
                .iter()
                .position(|r| r.iter().zip(&raw).all(|(a, b)| (a - b).abs() < 1e-5 * (1.0 + a.abs())))
                .unwrap();
            let resid = (st.apply_label(y[i]) - m.decision(sv)).abs();
            assert!(resid <= spec.epsilon + spec.tol + 1e-6, "{resid}");
        }
    }
}

#[test]
fn tiny_gamma_tends_to_a_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, y) = random_instance(&mut rng, 30, 2);
    let spec = SvrSpec { kernel: Kernel::Rbf { gamma: Some(1e-9) }, ..SvrSpec::default() };
    let (m, _) = svr_fit(&x, &y, &spec).unwrap();
    let a = m.predict(&[-1.5, 1.5]).unwrap();
    let b = m.predict(&[1.9, -0.3]).unwrap();
    assert!((a - b).abs() < 1e-4, "{a} {b}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn label_shift_moves_predictions_by_the_shift(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = random_instance(&mut rng, 15, 2);
        let shifted: Vec<f64> = y.iter().map(|v| v + shift).collect();
        let spec = SvrSpec::default();
        let (a, _) = svr_fit(&x, &y, &spec).unwrap();
        let (b, _) = svr_fit(&x, &shifted, &spec).unwrap();
        for r in &x {
            let d = b.predict(r).unwrap() - a.predict(r).unwrap() - shift;
            prop_assert!(d.abs() < 1e-3 * (1.0 + shift.abs()), "{d}");
        }
    }

    #[test]
    fn rbf_prediction_is_continuous(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = random_instance(&mut rng, 20, 2);
        let (m, _) = svr_fit(&x, &y, &SvrSpec::default()).unwrap();
        let p = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let base = m.predict(&p).unwrap();
        let mut prev = f64::INFINITY;
        for h in [1e-2, 1e-3, 1e-4, 1e-5] {
            let moved = m.predict(&[p[0] + h, p[1] - h]).unwrap();
            let d = (moved - base).abs();
            prop_assert!(d <= prev * 0.2 + 1e-12, "jump {d} at step {h}");
            prev = d;
        }
    }
}
