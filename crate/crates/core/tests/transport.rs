use proptest::prelude::*;
use selflabel::matrix::logsumexp;
use selflabel::metrics::{cross_entropy_soft, entropy_of_counts, mutual_information};
use selflabel::oracle::{assignment_cost, brute_force_exact, solve_exact};
use selflabel::sinkhorn::{regularized_objective, transport_cost, RandomLogits};
use selflabel::{round_to_hard, sinkhorn_solve, HardAssignment, Labeling, LogPredictionMatrix, Marginals, SinkhornConfig, TransportPlan};

fn random(k: usize, n: usize, scale: f64, seed: u64) -> LogPredictionMatrix {
    RandomLogits::new(k, n, scale, seed).unwrap().to_matrix().unwrap()
}

/// Every assignment whose label counts equal `caps`, in lexicographic order.
fn balanced_assignments(n: usize, caps: &[usize]) -> Vec<Vec<usize>> {
    fn go(i: usize, n: usize, left: &mut Vec<usize>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        for y in 0..left.len() {
            if left[y] > 0 {
                left[y] -= 1;
                cur.push(y);
                go(i + 1, n, left, cur, out);
                cur.pop();
                left[y] += 1;
            }
        }
    }
    let mut out = Vec::new();
    go(0, n, &mut caps.to_vec(), &mut Vec::new(), &mut out);
    out
}

fn permuted_columns(log_p: &LogPredictionMatrix, perm: &[usize]) -> LogPredictionMatrix {
    let k = log_p.classes();
    let values = perm.iter().flat_map(|&i| log_p.column(i).to_vec()).collect();
    LogPredictionMatrix::from_columns(k, perm.len(), values).unwrap()
}

fn permuted_rows(log_p: &LogPredictionMatrix, perm: &[usize]) -> LogPredictionMatrix {
    let (k, n) = (log_p.classes(), log_p.points());
    let values = (0..n).flat_map(|i| perm.iter().map(move |&y| log_p.get(y, i))).collect();
    LogPredictionMatrix::from_columns(k, n, values).unwrap()
}

fn shuffle(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn equipartition_marginals_are_valid(k in 1usize..=1000, extra in 0usize..1000) {
        let n = (k + extra).min(1000);
        let k = k.min(n);
        let m = Marginals::equipartition(k, n).unwrap();
        let rows: f64 = m.row().iter().sum();
        let cols: f64 = m.col().iter().sum();
        prop_assert!((rows - 1.0).abs() < 1e-9 && (cols - 1.0).abs() < 1e-9);
        let caps = m.capacities().unwrap();
        prop_assert_eq!(caps.iter().sum::<usize>(), n);
        prop_assert!(caps.iter().all(|&c| c == n / k || c == n / k + 1));
    }

    #[test]
    fn prediction_columns_are_distributions(k in 1usize..10, n in 1usize..50, scale in 0.0f64..40.0, seed in any::<u64>()) {
        let lp = random(k, n, scale, seed);
        for i in 0..n {
            let total: f64 = lp.column(i).iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn converged_plans_are_feasible(k in 1usize..=8, extra in 0usize..=248, scale in 0.0f64..4.0, seed in any::<u64>()) {
        let n = k + extra;
        let lp = random(k, n, scale, seed);
        let cfg = SinkhornConfig::default();
        let m = Marginals::equipartition(k, n).unwrap();
        let (plan, _, diag) = sinkhorn_solve(&lp, &m, &cfg, None).unwrap();
        if diag.converged {
            prop_assert!(diag.final_marginal_violation <= cfg.tolerance);
            prop_assert!(plan.marginal_violation() <= cfg.tolerance);
        }
    }

    #[test]
    fn entropic_optimum_beats_every_hard_plan(k in 1usize..=3, extra in 0usize..=5, seed in any::<u64>()) {
        let n = k + extra;
        let lp = random(k, n, 3.0, seed);
        let cfg = SinkhornConfig { tolerance: 1e-10, max_iterations: 100_000, ..SinkhornConfig::default() };
        let m = Marginals::equipartition(k, n).unwrap();
        let (plan, _, diag) = sinkhorn_solve(&lp, &m, &cfg, None).unwrap();
        prop_assume!(diag.converged);
        let best = regularized_objective(&plan, &lp, cfg.lambda).unwrap();
        for labels in balanced_assignments(n, &m.capacities().unwrap()) {
            let hard = TransportPlan::from_assignment(&HardAssignment::new(labels, k).unwrap(), m.clone()).unwrap();
            let value = regularized_objective(&hard, &lp, cfg.lambda).unwrap();
            prop_assert!(best <= value + 1e-8, "{best} > {value}");
        }
    }

    #[test]
    fn hungarian_matches_enumeration(k in 1usize..=3, extra in 0usize..=6, scale in 0.0f64..6.0, seed in any::<u64>()) {
        let n = (k + extra).min(9);
        let lp = random(k, n, scale, seed);
        let m = Marginals::equipartition(k, n).unwrap();
        let (fast, fast_cost) = solve_exact(&lp, &m).unwrap();
        let (slow, slow_cost) = brute_force_exact(&lp, &m).unwrap();
        prop_assert!((fast_cost - slow_cost).abs() <= 1e-12);
        prop_assert!(fast.is_balanced());
        prop_assert!((assignment_cost(&lp, fast.labels()) - assignment_cost(&lp, slow.labels())).abs() <= 1e-12);
    }

    #[test]
    fn optimal_cost_ignores_point_order(k in 1usize..=4, extra in 0usize..=30, seed in any::<u64>()) {
        let n = k + extra;
        let lp = random(k, n, 4.0, seed);
        let moved = permuted_columns(&lp, &shuffle(n, seed ^ 1));
        let a = solve_exact(&lp, &Marginals::equipartition(k, n).unwrap()).unwrap().1;
        let b = solve_exact(&moved, &Marginals::equipartition(k, n).unwrap()).unwrap().1;
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn optimal_labels_follow_class_relabelling(k in 1usize..=4, per in 1usize..=8, seed in any::<u64>()) {
        let n = k * per;
        let lp = random(k, n, 4.0, seed);
        let perm = shuffle(k, seed ^ 2);
        let moved = permuted_rows(&lp, &perm);
        let m = Marginals::equipartition(k, n).unwrap();
        let (a, ca) = solve_exact(&lp, &m).unwrap();
        let (b, cb) = solve_exact(&moved, &m).unwrap();
        prop_assert!((ca - cb).abs() <= 1e-12);
        let relabelled: Vec<usize> = b.labels().iter().map(|&y| perm[y]).collect();
        prop_assert!((assignment_cost(&lp, &relabelled) - assignment_cost(&lp, a.labels())).abs() <= 1e-12);
    }

    #[test]
    fn oracle_lower_bounds_rounded_sinkhorn(k in 1usize..=5, extra in 0usize..=55, scale in 0.0f64..4.0, seed in any::<u64>()) {
        let n = k + extra;
        let lp = random(k, n, scale, seed);
        let m = Marginals::equipartition(k, n).unwrap();
        let (plan, _, _) = sinkhorn_solve(&lp, &m, &SinkhornConfig::default(), None).unwrap();
        let rounded = round_to_hard(&plan);
        // Only roundings that hit the capacities exactly lie in the oracle's feasible set.
        prop_assume!(rounded.counts() == m.capacities().unwrap().as_slice());
        let exact = solve_exact(&lp, &m).unwrap().1;
        prop_assert!(exact <= assignment_cost(&lp, rounded.labels()) + 1e-12);
    }

    #[test]
    fn soft_cross_entropy_is_shifted_transport_cost(k in 1usize..=6, extra in 0usize..=60, scale in 0.0f64..5.0, seed in any::<u64>()) {
        let n = k + extra;
        let lp = random(k, n, scale, seed);
        let m = Marginals::equipartition(k, n).unwrap();
        let (plan, _, _) = sinkhorn_solve(&lp, &m, &SinkhornConfig::default(), None).unwrap();
        let ce = cross_entropy_soft(&lp, &plan).unwrap();
        let cost = transport_cost(&plan, &lp).unwrap();
        prop_assert!((ce + (n as f64).ln() - cost).abs() <= 1e-10);
    }
}

#[test]
fn deterministic_equipartition_entropies() {
    for (k, per) in [(2usize, 3usize), (3, 5), (5, 1), (4, 10)] {
        let n = k * per;
        let labels = Labeling::new((0..n).map(|i| i % k).collect(), k).unwrap();
        let information = mutual_information(&labels);
        assert!((information - (k as f64).ln()).abs() <= 1e-12);
        // q(y, i) = 1/N on the labelled cell of each point: one unit count per cell.
        let joint = entropy_of_counts(&vec![1; n]);
        assert!((joint - (n as f64).ln()).abs() <= 1e-12);
        let chain = (n as f64).ln() + (k as f64).ln() - information;
        assert!((joint - chain).abs() <= 1e-12);
    }
    let constant = Labeling::new(vec![0; 7], 3).unwrap();
    assert_eq!(mutual_information(&constant), 0.0);
}

#[test]
fn rounding_agrees_with_oracle_at_moderate_lambda() {
    // Confidences vary per point so the optimum is unique.
    let (k, n) = (3, 12);
    let truth: Vec<usize> = (0..n).map(|i| (i * 7) % k).collect();
    let mut values = Vec::with_capacity(k * n);
    for (i, &t) in truth.iter().enumerate() {
        let top = 0.6 + 0.03 * i as f64;
        let col: Vec<f64> = (0..k).map(|y| if y == t { top } else { (1.0 - top) / 2.0 }).collect();
        values.extend(col.iter().map(|p| p.ln()));
    }
    let lp = LogPredictionMatrix::from_columns(k, n, values).unwrap();
    let m = Marginals::equipartition(k, n).unwrap();
    let (exact, _) = solve_exact(&lp, &m).unwrap();
    assert_eq!(exact.labels(), truth.as_slice());
    for lambda in [5.0, 25.0, 100.0] {
        let cfg = SinkhornConfig { lambda, max_iterations: 100_000, ..SinkhornConfig::default() };
        let (plan, _, diag) = sinkhorn_solve(&lp, &m, &cfg, None).unwrap();
        assert!(diag.converged, "lambda {lambda}");
        if lambda >= 25.0 {
            assert_eq!(round_to_hard(&plan).labels(), exact.labels(), "lambda {lambda}");
        }
    }
}

#[test]
fn warm_start_saves_iterations() {
    use rand::{Rng, SeedableRng};
    let cfg = SinkhornConfig { check_interval: 1, max_iterations: 100_000, ..SinkhornConfig::default() };
    let mut faster = 0;
    for seed in 0..100u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (k, n) = (rng.random_range(2..=5), rng.random_range(20..=60));
        let lp = random(k, n, 3.0, seed);
        let m = Marginals::equipartition(k, n).unwrap();
        let (_, state, _) = sinkhorn_solve(&lp, &m, &cfg, None).unwrap();
        let mut values = Vec::with_capacity(k * n);
        for i in 0..n {
            let col: Vec<f64> = lp.column(i).iter().map(|v| v + rng.random_range(-1e-3..1e-3)).collect();
            let z = logsumexp(&col);
            values.extend(col.iter().map(|v| v - z));
        }
        let nudged = LogPredictionMatrix::from_columns(k, n, values).unwrap();
        let (_, _, cold) = sinkhorn_solve(&nudged, &m, &cfg, None).unwrap();
        let (_, _, warm) = sinkhorn_solve(&nudged, &m, &cfg, Some(&state)).unwrap();
        assert!(warm.warm_started && !cold.warm_started);
        if warm.iterations_run < cold.iterations_run {
            faster += 1;
        }
    }
    assert!(faster >= 90, "warm start faster on {faster}/100");
}
