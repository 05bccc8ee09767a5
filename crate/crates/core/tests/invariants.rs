use gpcs_core::data::{denormalize_pixel, make_synthetic_manifold, normalize_pixel};
use gpcs_core::metrics::{all_pairs, estimate_rec, estimate_s_rec, mse, mssim, residual_error, SsimConfig};
use gpcs_core::mlp::{Activation, MlpNetwork};
use gpcs_core::sensing::make_measurement_operator;
use gpcs_core::solvers::{gradient_step, npgd_reconstruct, pgd_reconstruct, InnerConfig, SolverConfig};
use gpcs_core::training::began::BeganState;
use gpcs_core::{Rng, Tensor};
use proptest::prelude::*;

fn reversed_rows(t: &Tensor) -> Tensor {
    let idx: Vec<usize> = (0..t.rows()).rev().collect();
    t.select_rows(&idx).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mssim_is_one_on_identical_images_and_symmetric(seed in any::<u64>(), rows in 7usize..14, cols in 7usize..14) {
        let mut rng = Rng::new(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        let y: Vec<f64> = (0..rows * cols).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        let cfg = SsimConfig::default();
        prop_assert_eq!(mssim(&x, &x, rows, cols, &cfg).unwrap(), 1.0);
        let (a, b) = (mssim(&x, &y, rows, cols, &cfg).unwrap(), mssim(&y, &x, rows, cols, &cfg).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn batch_metrics_ignore_order(seed in any::<u64>(), c in 1usize..8) {
        let mut rng = Rng::new(seed);
        let a = make_measurement_operator(5, 9, &mut rng).unwrap();
        let x = rng.gaussian(&[c, 9], 0.0, 1.0).unwrap();
        let t = rng.gaussian(&[c, 9], 0.0, 1.0).unwrap();
        let y = rng.gaussian(&[c, 5], 0.0, 1.0).unwrap();
        let (m1, m2) = (mse(&x, &t).unwrap(), mse(&reversed_rows(&x), &reversed_rows(&t)).unwrap());
        prop_assert!((m1 - m2).abs() <= 1e-12 * m1.max(1.0));
        let (r1, r2) = (residual_error(&a, &x, &y).unwrap(), residual_error(&a, &reversed_rows(&x), &reversed_rows(&y)).unwrap());
        prop_assert!((r1 - r2).abs() <= 1e-12 * r1.max(1.0));
    }

    #[test]
    fn s_rec_gamma_equals_rec_alpha(seed in any::<u64>(), m in 1usize..10, c in 2usize..9) {
        let mut rng = Rng::new(seed);
        let a = make_measurement_operator(m, 10, &mut rng).unwrap();
        let (x1, x2) = all_pairs(&rng.gaussian(&[c, 10], 0.0, 1.0).unwrap()).unwrap();
        let rec = estimate_rec(&a, &x1, &x2, seed).unwrap();
        let srec = estimate_s_rec(&a, &x1, &x2, seed).unwrap();
        prop_assert_eq!(rec.alpha, srec.gamma);
        prop_assert!(0.0 <= rec.alpha && rec.alpha <= rec.beta);
    }

    #[test]
    fn gradient_step_is_affine(seed in any::<u64>(), s in -3.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let a = make_measurement_operator(4, 7, &mut rng).unwrap();
        let (x1, x2) = (rng.gaussian(&[1, 7], 0.0, 1.0).unwrap(), rng.gaussian(&[1, 7], 0.0, 1.0).unwrap());
        let (y1, y2) = (rng.gaussian(&[1, 4], 0.0, 1.0).unwrap(), rng.gaussian(&[1, 4], 0.0, 1.0).unwrap());
        // w(s p1 + (1-s) p2) = s w(p1) + (1-s) w(p2)
        let mix = |u: &Tensor, v: &Tensor| u.scale(s).add(&v.scale(1.0 - s)).unwrap();
        let lhs = gradient_step(&mix(&x1, &x2), &a, &mix(&y1, &y2), 0.5).unwrap();
        let rhs = mix(&gradient_step(&x1, &a, &y1, 0.5).unwrap(), &gradient_step(&x2, &a, &y2, 0.5).unwrap());
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn exact_projection_is_idempotent_and_minimal(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = Rng::new(seed);
        let man = make_synthetic_manifold(12, k, &mut rng).unwrap();
        let x = rng.gaussian(&[1, 12], 0.0, 2.0).unwrap();
        let p = man.exact_project(&x).unwrap();
        prop_assert!(man.exact_project(&p).unwrap().max_abs_diff(&p).unwrap() < 1e-12);
        let best = x.sub(&p).unwrap().norm_sq();
        for _ in 0..50 {
            let z = rng.gaussian(&[1, k], 0.0, 2.0).unwrap();
            prop_assert!(best <= x.sub(&man.generate(&z).unwrap()).unwrap().norm_sq() + 1e-12);
        }
    }

    #[test]
    fn normalization_symmetry_and_recovery(p in 0u8..=255) {
        let v = normalize_pixel(f64::from(p));
        prop_assert!((normalize_pixel(255.0 - f64::from(p)) + v).abs() < 1e-15);
        prop_assert_eq!(denormalize_pixel(v), p);
    }

    #[test]
    fn beta_stays_in_the_unit_interval(seq in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0), 1..200), lambda in 0.0f64..1.0) {
        let mut s = BeganState::new(0.5, lambda);
        for (r, f) in seq {
            let b = s.update(r, f);
            prop_assert!((0.0..=1.0).contains(&b));
        }
    }

    #[test]
    fn solver_outputs_are_generator_evaluations(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let g = MlpNetwork::random(&[3, 8, 10], &[Activation::Relu, Activation::Tanh], 0, &mut rng).unwrap();
        let p = MlpNetwork::random(&[10, 8, 3], &[Activation::leaky(), Activation::Identity], 0, &mut rng).unwrap();
        let a = make_measurement_operator(6, 10, &mut rng).unwrap();
        let y = rng.gaussian(&[2, 6], 0.0, 1.0).unwrap();
        let cfg = SolverConfig { outer_iters: 3, inner: InnerConfig { iters: 5, ..InnerConfig::default() }, seed, ..SolverConfig::default() };
        for t in [pgd_reconstruct(&g, &a, &y, None, &cfg).unwrap(), npgd_reconstruct(&g, &p, &a, &y, None, &cfg).unwrap()] {
            let z = t.z_hat.as_ref().unwrap();
            prop_assert_eq!(g.forward(z, None).unwrap(), t.x_hat.clone());
            prop_assert_eq!(t.len(), 4);
        }
    }
}
