use dsblo::diagnostics::{brute_force_ll, window_weights};
use dsblo::dsblo::step_size;
use dsblo::lower_level::{sample_perturbation, solve_ll_quadratic, LowerLevelError};
use dsblo::rng::{stream, Stream};
use dsblo::{generate_instance, DVector};
use proptest::prelude::*;

proptest! {
    #[test]
    fn window_weights_are_a_distribution(beta in 0.01f64..0.9999, k in 1u64..2000) {
        // the oldest weight β^{K-1}(1-β)/(1-β^K) must be representable
        prop_assume!((k - 1) as f64 * beta.ln() > -700.0);
        let w = window_weights(beta, k);
        prop_assert_eq!(w.len() as u64, k);
        prop_assert!(w.iter().all(|&a| a > 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        // newest weight is the largest
        prop_assert!(w.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn steps_never_exceed_window_share(m in prop::collection::vec(-1e6f64..1e6, 1..8), g1 in 1e-3f64..1e3, g2 in 1e-3f64..1e3) {
        let m = DVector::from_vec(m);
        let eta = step_size(&m, g1, g2);
        prop_assert!(eta * m.norm() < 1.0 / g1);
        prop_assert!(eta <= 1.0 / g2);
    }

    #[test]
    fn active_set_solver_matches_enumeration(
        seed in 0u64..10_000,
        d_u in 1usize..4,
        d_l in 1usize..4,
        k in 0usize..6,
        scale in 0.1f64..3.0,
    ) {
        let inst = generate_instance(d_u, d_l, k, seed).unwrap();
        let mut rng = stream(seed, Stream::Sampling);
        let q = sample_perturbation(1e-3, d_l, &mut rng).unwrap();
        let x = DVector::from_fn(d_u, |i, _| scale * if i % 2 == 0 { 1.0 } else { -0.5 });
        match (solve_ll_quadratic(&inst, &x, &q), brute_force_ll(&inst, &x, &q)) {
            (Ok(sol), Some(bf)) => {
                prop_assert!((&sol.y - &bf.y).norm() <= 1e-8);
                prop_assert_eq!(sol.active_set, bf.active_set);
                prop_assert!(sol.kkt_residual <= 1e-10);
            }
            (Err(LowerLevelError::Infeasible { .. }), None) => {}
            (a, b) => prop_assert!(false, "solver {:?} vs reference {:?}", a.map(|s| s.y), b.map(|s| s.y)),
        }
    }
}
