use ei_core::calculus::{fd_jacobians, max_rel_err, trace_and_jacobians};
use ei_core::linsys::{rank_nullspace, Assembly, MonomialIndex, DEFAULT_RANK_TOL};
use ei_core::polarize::{exchange, realize_weights};
use ei_core::reduce::distance;
use ei_core::trainer::size_rule;
use ei_core::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arch() -> impl Strategy<Value = (usize, Vec<usize>)> {
    (1usize..=3, prop::collection::vec(1usize..=4, 1..=3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sigmoid_is_inside_unit_interval_and_mirrored(theta in -800.0f64..800.0) {
        let h = sigmoid(theta).unwrap();
        prop_assert!(h > 0.0 && h < 1.0);
        let mirrored = sigmoid(-theta).unwrap();
        prop_assert!((h + mirrored - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn weakened_pass_means_right_side_of_half(
        outputs in prop::collection::vec(0.001f64..0.999, 1..5),
        pick in 0usize..5,
        delta in 0.0f64..0.3,
    ) {
        let label = pick % outputs.len() + 1;
        let mode = TerminationMode::weakened(delta).unwrap();
        let c = check_condition(&outputs, label, &mode).unwrap();
        let right = outputs.iter().enumerate().all(|(q, &h)| {
            if q + 1 == label { h > 0.5 + delta } else { h < 0.5 - delta }
        });
        prop_assert_eq!(c.pass, right);
        prop_assert_eq!(c.pass, c.margin > 0.0);
    }

    #[test]
    fn ideal_pass_implies_weakened_pass(
        outputs in prop::collection::vec(0.001f64..0.999, 2..5),
        eps in 0.0f64..0.4,
    ) {
        let ideal = check_condition(&outputs, 1, &TerminationMode::ideal(eps).unwrap()).unwrap();
        let delta = 0.5 - eps - 1e-12;
        if ideal.pass && delta >= 0.0 {
            let weak = check_condition(&outputs, 1, &TerminationMode::weakened(delta).unwrap()).unwrap();
            prop_assert!(weak.pass);
        }
    }

    #[test]
    fn analytic_jacobians_match_differences((m, layers) in arch(), seed in any::<u64>()) {
        let spec = NetSpec::new(m, layers).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = WeightSet::random(&spec, &mut rng);
        let x: Vec<f64> = (0..m).map(|i| (i as f64 + 1.0) * 0.3 - 0.5).collect();
        let (_, analytic) = trace_and_jacobians(&spec, &w, &x).unwrap();
        let fd = fd_jacobians(&spec, &w, &x, 1e-5).unwrap();
        for (u, f) in fd.iter().enumerate() {
            prop_assert!(max_rel_err(analytic.layer(u), f) <= 1e-5);
        }
    }

    #[test]
    fn nullity_is_columns_minus_rank(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(rows, cols, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let b = rank_nullspace(&a, DEFAULT_RANK_TOL).unwrap();
        prop_assert_eq!(b.rank + b.nullity(), cols);
        prop_assert!(b.rank <= rows.min(cols));
        for j in 0..b.nullity() {
            prop_assert!((&a * b.vector(j)).amax() <= 1e-9);
        }
    }

    #[test]
    fn extra_rows_never_raise_nullity(cols in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(cols + 2, cols, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let mut last = cols;
        for r in 1..=a.nrows() {
            let b = rank_nullspace(&a.rows(0, r).into_owned(), DEFAULT_RANK_TOL).unwrap();
            prop_assert!(b.nullity() <= last);
            last = b.nullity();
        }
        prop_assert_eq!(last, 0);
    }

    #[test]
    fn realization_reproduces_path_products(
        widths in prop::collection::vec(1usize..=3, 2..=3),
        seed in any::<u64>(),
    ) {
        let spec = NetSpec::new(2, widths).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = WeightSet::random(&spec, &mut rng);
        let index = MonomialIndex::new(&spec, 1, Assembly::CCorrected).unwrap();
        let q = index.expand(&w);
        let r = realize_weights(&q, &index, &spec).unwrap();
        let back = index.expand_chain(&r.chain);
        prop_assert!((back - &q).amax() <= 1e-9 * (1.0 + q.amax()));
    }

    #[test]
    fn exchange_keeps_path_products(seed in any::<u64>(), g in 0.25f64..4.0) {
        let spec = NetSpec::new(2, vec![3, 2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = WeightSet::random(&spec, &mut rng);
        let index = MonomialIndex::new(&spec, 1, Assembly::CCorrected).unwrap();
        let mut chain = w.layers().to_vec();
        exchange(&mut chain, &[vec![g, 1.0 / g, g], vec![g, 2.0]]).unwrap();
        let a = index.expand(&w);
        let b = index.expand_chain(&chain);
        prop_assert!((a - b).amax() <= 1e-12 * 16.0);
    }

    #[test]
    fn distance_is_a_metric(
        a in prop::collection::vec(-5.0f64..5.0, 3),
        b in prop::collection::vec(-5.0f64..5.0, 3),
        c in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let s = |v: &Vec<f64>| Sample::new(v.clone(), 1).unwrap();
        let (sa, sb, sc) = (s(&a), s(&b), s(&c));
        let ab = distance(&sa, &sb).unwrap();
        prop_assert_eq!(ab, distance(&sb, &sa).unwrap());
        prop_assert_eq!(distance(&sa, &sa).unwrap(), 0.0);
        prop_assert!(ab <= distance(&sa, &sc).unwrap() + distance(&sc, &sb).unwrap() + 1e-12);
    }

    #[test]
    fn size_rule_is_the_smallest_strict_cover(m in 1usize..6, phi in 1usize..40, ln in 1usize..5) {
        let w = size_rule(m, phi, ln).unwrap();
        prop_assert!(w * (m + ln) > phi * m * ln);
        prop_assert!((w - 1) * (m + ln) <= phi * m * ln);
    }
}
