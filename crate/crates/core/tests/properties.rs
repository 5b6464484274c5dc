use std::sync::Arc;

use proptest::prelude::*;
use sfpe::stats::pairwise_sum;
use sfpe::{
    estimate_value, CoefficientField, Constants, DMatrix, DVector, Diffusion, Drift, Estimate, McConfig, PicardConfig,
    ProblemSpec, Quadrature, RngStream, TimeGrid,
};

fn linear_brownian(a: Vec<f64>) -> ProblemSpec {
    let d = a.len();
    let coeffs = CoefficientField::new(d, Drift::Zero, Diffusion::Constant(DMatrix::identity(d, d))).unwrap();
    let a = DVector::from_vec(a);
    let constants = Constants {
        c: 0.0,
        growth_c: d as f64,
        alpha: 1.0,
        lipschitz: 0.1,
        growth_p: 1.0,
    };
    ProblemSpec::new(
        "linear",
        1.0,
        coeffs,
        Arc::new(|_, _, _, _| 0.0),
        Arc::new(move |x| a.dot(x)),
        constants,
    )
    .unwrap()
    .decoupled()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pairwise_sum_exact_on_integers(v in prop::collection::vec(-1_000_000i64..1_000_000, 0..500)) {
        let floats: Vec<f64> = v.iter().map(|&k| k as f64).collect();
        prop_assert_eq!(pairwise_sum(&floats), v.iter().sum::<i64>() as f64);
    }

    #[test]
    fn identical_samples_give_zero_stderr(x in -1e6f64..1e6, n in 1usize..200) {
        let e = Estimate::from_samples(&vec![vec![x]; n]).unwrap();
        prop_assert_eq!(e.mean[0], x);
        prop_assert_eq!(e.stderr[0], 0.0);
    }

    #[test]
    fn shifting_samples_shifts_mean(v in prop::collection::vec(-10.0f64..10.0, 2..100), c in -1e3f64..1e3) {
        let base = Estimate::from_samples(&v.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap();
        let shifted = Estimate::from_samples(&v.iter().map(|&x| vec![x + c]).collect::<Vec<_>>()).unwrap();
        prop_assert!((shifted.mean[0] - base.mean[0] - c).abs() <= 1e-9 * (1.0 + c.abs()));
        prop_assert!((shifted.stderr[0] - base.stderr[0]).abs() <= 1e-9 * (1.0 + c.abs()));
    }

    #[test]
    fn uniform_grid_covers_interval(t0 in 0.0f64..1.0, span in 1e-3f64..5.0, n in 1usize..400) {
        let grid = TimeGrid::uniform(t0, t0 + span, n).unwrap();
        prop_assert_eq!(grid.n_steps(), n);
        prop_assert_eq!(grid.t_start(), t0);
        prop_assert_eq!(grid.t_end(), t0 + span);
        let total: f64 = (0..n).map(|k| grid.dt(k)).sum();
        prop_assert!((total - span).abs() <= 1e-12 * span.max(1.0) * n as f64);
        prop_assert!((0..n).all(|k| grid.dt(k) > 0.0));
    }

    #[test]
    fn sibling_streams_differ(seed in any::<u64>(), i in 0u64..1_000, j in 0u64..1_000) {
        let root = RngStream::new(seed);
        prop_assert_eq!(root.child(i), root.child(i));
        if i != j {
            prop_assert_ne!(root.child(i).key(), root.child(j).key());
        }
    }

    #[test]
    fn cost_grows_with_samples(m in prop::collection::vec(1usize..6, 1..4), level in 0usize..4, k in 2usize..6) {
        let level = level % m.len();
        for q in [Quadrature::LeftPoint, Quadrature::RandomizedUniform] {
            let base = PicardConfig::new(m.clone()).grid_steps(k).quadrature(q);
            let mut more = m.clone();
            more[level] += 1;
            let bigger = PicardConfig::new(more).grid_steps(k).quadrature(q);
            prop_assert!(bigger.predicted_steps() > base.predicted_steps());
            prop_assert!(base.clone().antithetic(true).predicted_steps() > base.predicted_steps());
        }
    }

    #[test]
    fn antithetic_linear_payoff_is_exact(
        a in prop::collection::vec(-2.0f64..2.0, 1..4),
        x0 in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        // Under Brownian motion the pair average of a.(x + W) and a.(x - W) is a.x.
        let d = a.len();
        let spec = linear_brownian(a.clone());
        let x = DVector::from_element(d, x0);
        let exact: f64 = a.iter().sum::<f64>() * x0;
        let h = |_: f64, _: &DVector<f64>| 0.0;
        let e = estimate_value(&spec, 0.0, &x, &h, McConfig::new(16, 4).antithetic(true), RngStream::new(seed)).unwrap();
        prop_assert!((e.mean[0] - exact).abs() <= 1e-12 * (1.0 + exact.abs()));
        prop_assert!(e.stderr[0] <= 1e-12 * (1.0 + exact.abs()));
    }
}
