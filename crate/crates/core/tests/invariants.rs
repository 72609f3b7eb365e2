use censidx::io::RunConfig;
use censidx::selection::{sandwich, score_norm_e2};
use censidx::survival::{censoring_distribution, empirical_cdf, km_jump_weights};
use censidx::CensoredSample;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn censored_sample() -> impl Strategy<Value = CensoredSample> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(z, delta)| {
                let x = z.iter().map(|v| v * 0.5).collect();
                CensoredSample::new(z, delta, x, 1).unwrap()
            })
    })
}

fn spd(k: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0f64..2.0, k * k).prop_map(move |v| {
        let a = DMatrix::from_vec(k, k, v);
        &a * a.transpose() + DMatrix::identity(k, k)
    })
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    (a - b).amax() <= tol * (1.0 + b.amax())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn distribution_estimates_are_monotone_in_unit_interval(sample in censored_sample()) {
        let g = censoring_distribution(&sample);
        let h = empirical_cdf(&sample);
        let mut grid: Vec<f64> = sample.z().to_vec();
        grid.extend(sample.z().iter().map(|v| v + 1e-6));
        grid.push(-10.0);
        grid.push(10.0);
        grid.sort_by(f64::total_cmp);
        let mut last = (0.0, 0.0);
        for &t in &grid {
            let (gv, hv) = (g.eval(t), h.eval(t));
            prop_assert!((0.0..=1.0).contains(&gv) && (0.0..=1.0).contains(&hv));
            prop_assert!(g.eval_left(t) <= gv && h.eval_left(t) <= hv);
            prop_assert!(gv >= last.0 && hv >= last.1);
            last = (gv, hv);
        }
    }

    #[test]
    fn jump_weights_are_nonnegative_with_mass_at_most_one(sample in censored_sample()) {
        let w = km_jump_weights(&sample);
        prop_assert!(w.as_slice().iter().all(|&v| v >= 0.0));
        prop_assert!(w.total_mass() <= 1.0 + 1e-12);
        for i in 0..sample.n() {
            if !sample.delta()[i] {
                prop_assert_eq!(w.get(i), 0.0);
            }
        }
    }

    #[test]
    fn score_norm_scales_exactly_under_powers_of_two(
        v in spd(3),
        w in prop::collection::vec(-3.0f64..3.0, 3),
        e in -4i32..4,
        n in 1usize..500,
    ) {
        let c = 2f64.powi(e);
        let w = DVector::from_vec(w);
        let (base, _) = score_norm_e2(&v, &w, n);
        let (scaled_v, _) = score_norm_e2(&(&v * c), &w, n);
        let (scaled_w, _) = score_norm_e2(&v, &(&w * c), n);
        prop_assert_eq!(scaled_v, base / (c * c));
        prop_assert_eq!(scaled_w, base * c * c);
    }

    #[test]
    fn sandwich_special_cases(v in spd(3), d in spd(3)) {
        let (zero, _) = sandwich(&v, &DMatrix::zeros(3, 3));
        prop_assert_eq!(zero.amax(), 0.0);
        let (same, singular) = sandwich(&DMatrix::identity(3, 3), &d);
        prop_assert!(!singular);
        prop_assert!(close(&same, &d, 1e-14));
        let (s, _) = sandwich(&v, &d);
        prop_assert_eq!(s.clone(), s.transpose());
        prop_assert!(s.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn config_round_trips_through_toml(
        seed in any::<u64>(),
        radius in 0.01f64..10.0,
        jitter in 0.0f64..2.0,
        restarts in 0usize..10,
        parallel in any::<bool>(),
        n in 10usize..5000,
    ) {
        let mut cfg = RunConfig::default();
        cfg.set_seed(seed);
        cfg.fit.radius = radius;
        cfg.fit.prelim_jitter = jitter;
        cfg.fit.optimizer.restarts = restarts;
        cfg.fit.parallel = parallel;
        cfg.simulation.n = n;
        let text = toml::to_string(&cfg).unwrap();
        prop_assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg.clone());
        let json = serde_json::to_string(&cfg).unwrap();
        prop_assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
    }
}
