use dyadic_lab::grid::{average, inner_product, maximal_function, norm, FiniteModel, StepFunction};
use dyadic_lab::martingale::{decompose, difference, MartingaleLadder};
use dyadic_lab::shift::{random_shift, ComplexityType};
use dyadic_lab::weights::{a2_constant, cascade_weight, dual_weight, power_weight, Weight};
use proptest::prelude::*;

fn model() -> impl Strategy<Value = FiniteModel> {
    prop_oneof![
        (1u32..=8).prop_map(|n| FiniteModel::new(1, n).unwrap()),
        (1u32..=4).prop_map(|n| FiniteModel::new(2, n).unwrap()),
        (1u32..=2).prop_map(|n| FiniteModel::new(3, n).unwrap()),
    ]
}

fn weight(model: FiniteModel) -> impl Strategy<Value = Weight> {
    prop_oneof![
        (-0.95f64..0.95).prop_map(move |a| power_weight(a, model).unwrap()),
        (0.0f64..0.9, any::<u64>()).prop_map(move |(a, s)| cascade_weight(a, s, model).unwrap()),
    ]
}

fn function(model: FiniteModel) -> impl Strategy<Value = StepFunction> {
    prop::collection::vec(-10.0f64..10.0, model.n_leaves())
        .prop_map(move |v| StepFunction::from_values(model, v).unwrap())
}

fn setup() -> impl Strategy<Value = (FiniteModel, Weight, StepFunction, StepFunction)> {
    model().prop_flat_map(|m| (Just(m), weight(m), function(m), function(m)))
}

fn close(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn each_generation_partitions_the_leaves(m in model()) {
        for g in 0..=m.depth() {
            let mut hits = vec![0u32; m.n_leaves()];
            for q in m.generation_cubes(g) {
                for i in m.cube_leaves(&q).unwrap() {
                    hits[i] += 1;
                }
            }
            prop_assert!(hits.iter().all(|&h| h == 1));
        }
    }

    #[test]
    fn children_tile_their_parent(m in model()) {
        for q in m.all_cubes() {
            if q.generation() == m.depth() {
                continue;
            }
            let kids = q.children();
            prop_assert_eq!(kids.len(), 1usize << m.dim());
            let vol: f64 = kids.iter().map(|c| c.volume()).sum();
            prop_assert_eq!(vol, q.volume());
            prop_assert!(kids.iter().all(|c| c.parent() == Some(q)));
        }
    }

    #[test]
    fn doob_maximal_bound((_, w, f, _) in setup()) {
        let sigma = w.sigma_measure();
        let mf = maximal_function(&f, &sigma).unwrap();
        prop_assert!(norm(&mf, &sigma).unwrap() <= 2.0 * norm(&f, &sigma).unwrap() * (1.0 + 1e-12));
        for (a, b) in mf.values().iter().zip(f.values()) {
            prop_assert!(*a >= b.abs() * (1.0 - 1e-12));
        }
    }

    #[test]
    fn averages_are_linear((m, w, f, g) in setup(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let sigma = w.sigma_measure();
        let h = f.scale(a).add(&g.scale(b)).unwrap();
        for q in m.all_cubes() {
            let lhs = average(&h, &sigma, &q).unwrap();
            let rhs = a * average(&f, &sigma, &q).unwrap() + b * average(&g, &sigma, &q).unwrap();
            prop_assert!(close(lhs, rhs, 30.0));
        }
    }

    #[test]
    fn differences_contract_and_are_orthogonal(
        (m, w, f, _) in setup(),
        kappa in 1u32..=3,
        residue in 0u32..3,
    ) {
        prop_assume!(kappa <= m.depth() && residue < kappa && residue + kappa <= m.depth());
        let sigma = w.sigma_measure();
        let ladder = MartingaleLadder::new(sigma.clone(), kappa, residue).unwrap();
        let cubes: Vec<_> = ladder.cubes().collect();
        let diffs: Vec<StepFunction> = cubes.iter().map(|q| difference(&f, &ladder, q).unwrap()).collect();
        for (q, d) in cubes.iter().zip(&diffs) {
            let local = f.mul(&StepFunction::indicator(m, q).unwrap()).unwrap();
            prop_assert!(norm(d, &sigma).unwrap() <= norm(&local, &sigma).unwrap() * (1.0 + 1e-12) + 1e-300);
            let again = difference(d, &ladder, q).unwrap();
            prop_assert!(again.sub(d).unwrap().max_abs() <= 1e-10 * (1.0 + d.max_abs()));
        }
        let scale = norm(&f, &sigma).unwrap().powi(2);
        for i in 0..diffs.len().min(12) {
            for j in (i + 1)..diffs.len().min(12) {
                prop_assert!(inner_product(&diffs[i], &diffs[j], &sigma).unwrap().abs() <= 1e-10 * (1.0 + scale));
            }
        }
    }

    #[test]
    fn decomposition_reconstructs(
        (m, w, f, _) in setup(),
        kappa in 1u32..=3,
        residue in 0u32..3,
    ) {
        prop_assume!(kappa <= m.depth() && residue < kappa && residue + kappa <= m.depth());
        let ladder = MartingaleLadder::new(w.sigma_measure(), kappa, residue).unwrap();
        let dec = decompose(&f, &ladder).unwrap();
        prop_assert!(dec.reconstruct().sub(&f).unwrap().max_abs() <= 1e-10 * (1.0 + f.max_abs()));
    }

    #[test]
    fn weight_pairs_are_exact_and_a2_at_least_one((_, w, _, _) in setup()) {
        prop_assert!(w.is_exact_pair());
        for (a, b) in w.w().values().iter().zip(w.sigma().values()) {
            prop_assert_eq!(a * b, 1.0);
        }
        let a2 = a2_constant(&w).constant;
        prop_assert!(a2 >= 1.0);
        prop_assert_eq!(a2_constant(&dual_weight(&w)).constant, a2);
    }

    #[test]
    fn a2_is_scale_invariant((_, w, _, _) in setup(), k in -8i32..8) {
        let c = 2f64.powi(k);
        let scaled = w.scaled(c).unwrap();
        prop_assert!(close(a2_constant(&scaled).constant, a2_constant(&w).constant, 0.0));
    }

    #[test]
    fn adjoint_matrix_is_transpose(
        n in 2u32..=6,
        m_out in 0u32..=2,
        n_in in 0u32..=2,
        seed in any::<u64>(),
    ) {
        let model = FiniteModel::new(1, n).unwrap();
        let c = ComplexityType::new(m_out, n_in);
        prop_assume!(c.kappa() <= n);
        let s = random_shift(c, 0, seed, model).unwrap();
        let a = s.assemble_matrix().unwrap();
        let b = s.adjoint().assemble_matrix().unwrap();
        let t = a.transpose();
        for i in 0..model.n_leaves() {
            for j in 0..model.n_leaves() {
                prop_assert!((b.get(i, j) - t.get(i, j)).abs() <= 1e-12 * (1.0 + t.get(i, j).abs()));
            }
        }
    }

    #[test]
    fn matrix_free_apply_matches_matrix(
        n in 2u32..=6,
        seed in any::<u64>(),
        v in prop::collection::vec(-1.0f64..1.0, 64),
    ) {
        let model = FiniteModel::new(1, n).unwrap();
        let s = random_shift(ComplexityType::new(1, 1), 0, seed, model).unwrap();
        let f = StepFunction::from_values(model, v[..model.n_leaves()].to_vec()).unwrap();
        let direct = s.apply(&f).unwrap();
        let via = s.assemble_matrix().unwrap().mul_vec(f.values());
        for (a, b) in direct.values().iter().zip(&via) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
