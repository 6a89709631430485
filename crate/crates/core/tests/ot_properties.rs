use hardneg_core::ot::{brute_force_ot, entropic_objective, kl_to_product, product_coupling, sinkhorn};
use hardneg_core::{Histogram, MaskedCost, Matrix, SinkhornConfig};
use proptest::prelude::*;

fn cost_strategy(max_n: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (2..=max_n).prop_flat_map(|n| (Just(n), prop::collection::vec(0.0..1.0f64, n * n)))
}

fn masked(n: usize, costs: Vec<f64>, diag: bool) -> MaskedCost {
    let m = Matrix::from_vec(n, n, costs).unwrap();
    if diag {
        MaskedCost::with_forbidden_diagonal(m).unwrap()
    } else {
        MaskedCost::unmasked(m).unwrap()
    }
}

fn random_histogram(raw: &[f64]) -> Histogram {
    Histogram::normalized(raw.iter().map(|x| 0.1 + x).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn converged_plans_meet_marginals_and_factorize(
        (n, costs) in cost_strategy(12),
        wa in prop::collection::vec(0.0..1.0f64, 12),
        wb in prop::collection::vec(0.0..1.0f64, 12),
        eps in 0.05..2.0f64,
        diag in any::<bool>(),
    ) {
        let a = random_histogram(&wa[..n]);
        let b = random_histogram(&wb[..n]);
        // a zero diagonal is feasible only when a_i + b_i <= 1 for every i
        if diag {
            prop_assume!(n >= 3);
            prop_assume!(a.weights().iter().zip(b.weights()).all(|(x, y)| x + y < 0.95));
        }
        let cost = masked(n, costs, diag);
        let cfg = SinkhornConfig::new(eps);
        let c = sinkhorn(&cost, &a, &b, &cfg).unwrap();
        prop_assert!(c.marginal_error <= cfg.tolerance);
        let rows: f64 = c.plan.row_sums().iter().zip(a.weights()).map(|(r, w)| (r - w).abs()).sum();
        let cols: f64 = c.plan.col_sums().iter().zip(b.weights()).map(|(r, w)| (r - w).abs()).sum();
        prop_assert!(rows <= cfg.tolerance && cols <= cfg.tolerance);
        prop_assert!(c.factorization_residual(&cost, &a, &b, eps) <= 1e-9);
        for i in 0..n {
            for j in 0..n {
                let p = c.plan[(i, j)];
                prop_assert!(p >= 0.0);
                if cost.is_forbidden(i, j) {
                    prop_assert_eq!(p, 0.0);
                }
            }
        }
        prop_assert!((c.transport_cost - cost.transport_cost(&c.plan)).abs() < 1e-15);
    }

    #[test]
    fn permuting_rows_permutes_the_plan(
        (n, costs) in cost_strategy(8),
        wa in prop::collection::vec(0.0..1.0f64, 8),
        seed in any::<u64>(),
        eps in 0.1..1.0f64,
    ) {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let c = Matrix::from_vec(n, n, costs).unwrap();
        let a = random_histogram(&wa[..n]);
        let b = Histogram::uniform(n);
        let permuted_a = Histogram::new(perm.iter().map(|&p| a.weights()[p]).collect()).unwrap();
        let mut cfg = SinkhornConfig::new(eps);
        cfg.tolerance = 1e-12;
        let base = sinkhorn(&MaskedCost::unmasked(c.clone()).unwrap(), &a, &b, &cfg).unwrap();
        let moved = sinkhorn(&MaskedCost::unmasked(c.select_rows(&perm)).unwrap(), &permuted_a, &b, &cfg).unwrap();
        prop_assert!(moved.plan.l1_distance(&base.plan.select_rows(&perm)) < 1e-9);
    }

    #[test]
    fn scaling_cost_and_epsilon_together_leaves_the_plan(
        (n, costs) in cost_strategy(10),
        eps in 0.05..1.0f64,
        s in 0.01..100.0f64,
    ) {
        let cost = masked(n, costs.clone(), true);
        let scaled = masked(n, costs.iter().map(|c| c * s).collect(), true);
        let h = Histogram::uniform(n);
        let mut cfg = SinkhornConfig::new(eps);
        cfg.tolerance = 1e-12;
        let base = sinkhorn(&cost, &h, &h, &cfg).unwrap();
        cfg.epsilon = eps * s;
        let other = sinkhorn(&scaled, &h, &h, &cfg).unwrap();
        for (x, y) in base.plan.as_slice().iter().zip(other.plan.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn huge_epsilon_recovers_the_product((n, costs) in cost_strategy(12), wa in prop::collection::vec(0.0..1.0f64, 12)) {
        let cost = masked(n, costs, false);
        let a = random_histogram(&wa[..n]);
        let b = Histogram::uniform(n);
        let eps = 1e3 * cost.max_cost().max(1e-12);
        let c = sinkhorn(&cost, &a, &b, &SinkhornConfig::new(eps)).unwrap();
        prop_assert!(c.plan.l1_distance(&product_coupling(&a, &b).plan) <= 1e-3);
    }

    #[test]
    fn small_epsilon_approaches_the_assignment_value((n, costs) in cost_strategy(6)) {
        let cost = masked(n, costs, false);
        let h = Histogram::uniform(n);
        let exact = brute_force_ot(&cost, n).unwrap();
        let eps = 1e-3 * cost.max_cost();
        let c = sinkhorn(&cost, &h, &h, &SinkhornConfig::new(eps)).unwrap();
        // the entropic plan can only cost more, and by at most eps * log n
        prop_assert!(c.transport_cost >= exact - 1e-6);
        prop_assert!(c.transport_cost - exact <= 0.05 * exact.max(1e-3) + 2e-6);
    }

    #[test]
    fn regularized_value_is_positive_for_distinct_points(
        n in 3..10usize,
        raw in prop::collection::vec(-1.0..1.0f64, 30),
        eps in 0.01..2.0f64,
    ) {
        let d = 3;
        let mut pts: Vec<[f64; 3]> = (0..n).map(|i| [raw[3 * i], raw[3 * i + 1], raw[3 * i + 2]]).collect();
        for p in &mut pts {
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            prop_assume!(norm > 1e-3);
            p.iter_mut().for_each(|x| *x /= norm);
        }
        for i in 0..n {
            for j in 0..i {
                let dist: f64 = (0..d).map(|k| (pts[i][k] - pts[j][k]).powi(2)).sum();
                prop_assume!(dist > 1e-6);
            }
        }
        let costs = Matrix::from_fn(n, n, |i, j| 0.5 * (0..d).map(|k| (pts[i][k] - pts[j][k]).powi(2)).sum::<f64>());
        let cost = MaskedCost::with_forbidden_diagonal(costs).unwrap();
        let h = Histogram::uniform(n);
        let c = sinkhorn(&cost, &h, &h, &SinkhornConfig::new(eps)).unwrap();
        prop_assert!(entropic_objective(&c, &h, &h, eps).unwrap() > 0.0);
        prop_assert!(c.transport_cost > 0.0);
    }

    #[test]
    fn less_regularization_moves_further_from_the_product((n, costs) in cost_strategy(10)) {
        let cost = masked(n, costs, true);
        let h = Histogram::uniform(n);
        let sharp = sinkhorn(&cost, &h, &h, &SinkhornConfig::new(0.1)).unwrap();
        let smooth = sinkhorn(&cost, &h, &h, &SinkhornConfig::new(10.0)).unwrap();
        let k_sharp = kl_to_product(&sharp, &h, &h).unwrap();
        let k_smooth = kl_to_product(&smooth, &h, &h).unwrap();
        prop_assert!(k_sharp >= k_smooth - 1e-9);
    }
}
