//! Acceptance suite. Prints one PASS/FAIL line per criterion. Criteria are
//! reported rather than asserted so the whole suite always runs; set
//! `SL_ACCEPTANCE_STRICT=1` to turn any failure into a non-zero exit, and
//! `SL_ACCEPTANCE=A1,A4` to run a subset.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selflabel::data::{make_blobs, BlobSpec, Dataset, Split};
use selflabel::metrics::{cross_entropy_soft, mutual_information};
use selflabel::model::{loss_and_gradient, Architecture, ClassifierModel, HeadTarget, Trunk};
use selflabel::oracle::{assignment_cost, brute_force_exact, solve_exact};
use selflabel::pipeline::{
    derive_seed, evaluate_features, head_selection_metrics, retrain_from_labels, run_imbalance_suite_on,
    self_label_train, Method, TrainConfig, TrainOutcome, IMBALANCE_MODES,
};
use selflabel::sinkhorn::{sinkhorn_scale, transport_cost, RandomLogits};
use selflabel::{
    round_to_hard, sinkhorn_solve, FeatureMatrix, HardAssignment, Labeling, LogPredictionMatrix, Marginals,
    SinkhornConfig, TransportPlan,
};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn random_instance(rng: &mut ChaCha8Rng, max_k: usize, max_n: usize, max_scale: f64) -> LogPredictionMatrix {
    let k = rng.random_range(1..=max_k);
    let n = rng.random_range(k..=max_n);
    let scale = rng.random_range(0.0..max_scale);
    RandomLogits::new(k, n, scale, rng.random()).unwrap().to_matrix().unwrap()
}

fn a1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut identical, mut ties, mut worst) = (0, 0, 0.0f64);
    for trial in 0..500 {
        // Every fifth instance is quantized so that equal-cost optima are common.
        let lp = if trial % 5 == 4 {
            let k = rng.random_range(1..=3);
            let n = rng.random_range(k..=9);
            let values: Vec<f64> = (0..k * n).map(|_| rng.random_range(0..3) as f64).collect();
            let mut cols = Vec::with_capacity(k * n);
            for i in 0..n {
                let col: Vec<f64> = (0..k).map(|y| values[y * n + i]).collect();
                let z = selflabel::matrix::logsumexp(&col);
                cols.extend(col.iter().map(|v| v - z));
            }
            LogPredictionMatrix::from_columns(k, n, cols).unwrap()
        } else {
            random_instance(&mut rng, 3, 9, 6.0)
        };
        let m = Marginals::equipartition(lp.classes(), lp.points()).unwrap();
        let (fast, fast_cost) = solve_exact(&lp, &m).unwrap();
        let (slow, slow_cost) = brute_force_exact(&lp, &m).unwrap();
        if fast.labels() == slow.labels() {
            identical += 1;
            if fast_cost != slow_cost {
                return verdict(false, format!("trial {trial}: same labels, costs {fast_cost} vs {slow_cost}"));
            }
        } else {
            ties += 1;
            worst = worst.max((fast_cost - slow_cost).abs());
            let recomputed = assignment_cost(&lp, slow.labels());
            if (fast_cost - recomputed).abs() > 1e-12 || !fast.is_balanced() {
                return verdict(false, format!("trial {trial}: costs {fast_cost} vs {slow_cost}"));
            }
        }
    }
    verdict(
        true,
        format!("500 instances: {identical} identical assignments, {ties} equal-cost ties (max cost gap {worst:.1e})"),
    )
}

/// Columns drawn uniformly from the probability simplex.
fn simplex_instance(rng: &mut ChaCha8Rng, max_k: usize, max_n: usize) -> LogPredictionMatrix {
    let k = rng.random_range(1..=max_k);
    let n = rng.random_range(k..=max_n);
    let mut values = Vec::with_capacity(k * n);
    for _ in 0..n {
        let col: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(rand_distr::Exp1).ln()).collect();
        let z = selflabel::matrix::logsumexp(&col);
        values.extend(col.iter().map(|v| v - z));
    }
    LogPredictionMatrix::from_columns(k, n, values).unwrap()
}

fn a2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = SinkhornConfig {
        lambda: 25.0,
        tolerance: 1e-6,
        ..SinkhornConfig::default()
    };
    let (mut close, mut converged, mut feasible, mut off_capacity) = (0, 0, 0, 0);
    let mut worst_gap = 0.0f64;
    for _ in 0..200 {
        let lp = simplex_instance(&mut rng, 5, 60);
        let m = Marginals::equipartition(lp.classes(), lp.points()).unwrap();
        let (plan, _, diag) = sinkhorn_solve(&lp, &m, &cfg, None).unwrap();
        let rounded = round_to_hard(&plan);
        off_capacity += usize::from(rounded.counts() != m.capacities().unwrap().as_slice());
        let exact = solve_exact(&lp, &m).unwrap().1;
        let gap = (assignment_cost(&lp, rounded.labels()) - exact).abs();
        worst_gap = worst_gap.max(gap);
        if gap <= 1e-3 {
            close += 1;
        }
        if diag.converged {
            converged += 1;
            if diag.final_marginal_violation <= 1e-6 {
                feasible += 1;
            }
        }
    }
    verdict(
        close >= 190 && feasible == converged,
        format!(
            "{close}/200 within 1e-3 nats of the optimum (need 190), {feasible}/{converged} converged solves feasible, max gap {worst_gap:.2e}, {off_capacity} roundings off the capacities"
        ),
    )
}

fn gradient_error(trunk: Trunk, heads: &[usize], soft: bool) -> f64 {
    let (n, d) = (7, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(heads.len() as u64 * 10 + soft as u64);
    let x = FeatureMatrix::new(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let model = ClassifierModel::new(Architecture::new(d, trunk, heads.to_vec()).unwrap(), 9).unwrap();
    let hard: Vec<HardAssignment> = heads
        .iter()
        .map(|&k| HardAssignment::new((0..n).map(|_| rng.random_range(0..k)).collect(), k).unwrap())
        .collect();
    let plans: Vec<TransportPlan> = heads
        .iter()
        .map(|&k| {
            let lp = RandomLogits::new(k, n, 3.0, rng.random()).unwrap().to_matrix().unwrap();
            sinkhorn_solve(&lp, &Marginals::equipartition(k, n).unwrap(), &SinkhornConfig::default(), None)
                .unwrap()
                .0
        })
        .collect();
    let targets: Vec<HeadTarget<'_>> = if soft {
        plans.iter().map(HeadTarget::Soft).collect()
    } else {
        hard.iter().map(HeadTarget::Hard).collect()
    };
    let wd = 1e-2;
    let (_, grad) = loss_and_gradient(&model, &x, &targets, wd).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for p in 0..grad.len() {
        let mut plus = model.clone();
        plus.params_mut()[p] += h;
        let mut minus = model.clone();
        minus.params_mut()[p] -= h;
        let fp = loss_and_gradient(&plus, &x, &targets, wd).unwrap().0;
        let fm = loss_and_gradient(&minus, &x, &targets, wd).unwrap().0;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max((numeric - grad[p]).abs() / numeric.abs().max(grad[p].abs()).max(1e-6));
    }
    worst
}

fn a3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_shift = 0.0f64;
    for _ in 0..100 {
        let lp = random_instance(&mut rng, 6, 80, 5.0);
        let m = Marginals::equipartition(lp.classes(), lp.points()).unwrap();
        let (plan, _, _) = sinkhorn_solve(&lp, &m, &SinkhornConfig::default(), None).unwrap();
        let ce = cross_entropy_soft(&lp, &plan).unwrap();
        let cost = transport_cost(&plan, &lp).unwrap();
        worst_shift = worst_shift.max((ce + (lp.points() as f64).ln() - cost).abs());
    }
    let mut worst_info = 0.0f64;
    for (k, per) in [(2, 5), (3, 7), (4, 250), (10, 30)] {
        let n = k * per;
        let even = Labeling::new((0..n).map(|i| i % k).collect(), k).unwrap();
        worst_info = worst_info.max((mutual_information(&even) - (k as f64).ln()).abs());
        let constant = Labeling::new(vec![0; n], k).unwrap();
        worst_info = worst_info.max(mutual_information(&constant).abs());
    }
    let mut worst_grad = 0.0f64;
    for trunk in [Trunk::Identity, Trunk::Hidden { width: 5 }] {
        for heads in [vec![3], vec![3, 2, 4]] {
            for soft in [false, true] {
                worst_grad = worst_grad.max(gradient_error(trunk, &heads, soft));
            }
        }
    }
    verdict(
        worst_shift <= 1e-10 && worst_info <= 1e-12 && worst_grad <= 1e-4,
        format!(
            "shift identity max error {worst_shift:.1e}, information identities {worst_info:.1e}, gradient max relative error {worst_grad:.1e}"
        ),
    )
}

fn a4_data(seed: u64) -> Dataset {
    make_blobs(&BlobSpec::balanced(4, 2000, 16, 8.0, seed)).unwrap()
}

struct A4Run {
    data: Dataset,
    cfg: TrainConfig,
    outcome: TrainOutcome,
    nmi: f64,
}

fn a4_runs() -> &'static [A4Run] {
    static RUNS: OnceLock<Vec<A4Run>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let data = a4_data(seed);
                let cfg = TrainConfig::desk(4, 1, 80, 4, seed);
                let outcome = self_label_train(&data, &cfg).unwrap();
                let nmi = outcome.final_nmi(&data).unwrap();
                A4Run { data, cfg, outcome, nmi }
            })
            .collect()
    })
}

fn fmt(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
}

fn a4() -> Verdict {
    let runs = a4_runs();
    let nmis: Vec<f64> = runs.iter().map(|r| r.nmi).collect();
    let controls: Vec<f64> = runs
        .iter()
        .map(|r| {
            let cfg = TrainConfig { opts: 0, ..r.cfg.clone() };
            self_label_train(&r.data, &cfg).unwrap().final_nmi(&r.data).unwrap()
        })
        .collect();
    let good = nmis.iter().filter(|&&v| v >= 0.95).count();
    let below = nmis.iter().zip(&controls).filter(|(a, c)| c < a).count();
    verdict(
        good >= 4 && below == SEEDS.len(),
        format!("NMI [{}] ({good}/5 >= 0.95); M=0 control [{}] ({below}/5 lower)", fmt(&nmis), fmt(&controls)),
    )
}

fn a5() -> Verdict {
    let (mut collapsed, mut balanced) = (0, 0);
    let mut notes = Vec::new();
    for seed in SEEDS {
        let data = a4_data(seed);
        let unconstrained = TrainConfig {
            method: Method::Unconstrained,
            ..TrainConfig::desk(4, 1, 80, 6, seed)
        };
        let run = self_label_train(&data, &unconstrained).unwrap();
        let steps: Vec<_> = run.record.epochs.iter().filter(|e| !e.label_updates.is_empty()).collect();
        let collapse = steps
            .iter()
            .take(5)
            .any(|e| e.label_max_share[0] >= 0.9 && e.label_entropy[0] <= 0.05);
        let last = steps.last().unwrap();
        collapsed += usize::from(collapse);

        let constrained = TrainConfig::desk(4, 1, 80, 6, seed);
        let run = self_label_train(&data, &constrained).unwrap();
        let deviations: Vec<usize> = run.record.label_updates().map(|u| u.balance_deviation).collect();
        balanced += usize::from(deviations.iter().all(|&d| d == 0));
        notes.push(format!(
            "seed {seed}: max share {:.2}, MI {:.3}, constrained deviations {:?}",
            last.label_max_share[0], last.label_entropy[0], deviations
        ));
    }
    verdict(
        collapsed == SEEDS.len() && balanced == SEEDS.len(),
        format!("collapsed {collapsed}/5, always balanced {balanced}/5; {}", notes.join("; ")),
    )
}

fn probe_accuracy(model: &ClassifierModel, data: &Dataset, seed: u64) -> f64 {
    let split = data.clone().with_test_split(0.3, derive_seed(seed, 12)).unwrap();
    evaluate_features(model, &split.part(Split::Train), &split.part(Split::Test), seed)
        .unwrap()
        .probe
}

fn a6() -> Verdict {
    let runs = a4_runs();
    let mut close = 0;
    let mut pairs = Vec::new();
    for r in runs {
        let joint = probe_accuracy(&r.outcome.model, &r.data, r.cfg.seed);
        let fresh = retrain_from_labels(&r.data, &r.outcome.labels, &r.cfg).unwrap();
        let transferred = probe_accuracy(&fresh.model, &r.data, r.cfg.seed);
        close += usize::from((joint - transferred).abs() <= 0.03);
        pairs.push(format!("{joint:.3}/{transferred:.3}"));
    }
    verdict(close >= 4, format!("joint/retrained probe accuracy [{}], {close}/5 within 0.03", pairs.join(" ")))
}

/// Minimum seconds per sweep at each `(n, sweeps)` point. Rounds visit every
/// point in turn, so a transient slowdown does not land on all repetitions of one.
fn per_iteration_seconds(k: usize, grid: &[(usize, usize)], rounds: usize) -> Vec<f64> {
    let problems: Vec<_> = grid
        .iter()
        .map(|&(n, sweeps)| {
            let cfg = SinkhornConfig {
                lambda: 25.0,
                tolerance: f64::MIN_POSITIVE,
                max_iterations: sweeps,
                check_interval: sweeps,
            };
            (RandomLogits::new(k, n, 1.0, 7).unwrap(), Marginals::equipartition(k, n).unwrap(), cfg)
        })
        .collect();
    let mut best = vec![f64::INFINITY; grid.len()];
    for _ in 0..rounds {
        for ((source, marginals, cfg), best) in problems.iter().zip(&mut best) {
            let started = Instant::now();
            sinkhorn_scale(source, marginals, cfg, None).unwrap();
            *best = best.min(started.elapsed().as_secs_f64() / cfg.max_iterations as f64);
        }
    }
    best
}

fn a7() -> Verdict {
    let times = per_iteration_seconds(100, &[(10_000, 40), (100_000, 8), (1_000_000, 3)], 5);
    let ratios = [times[1] / times[0], times[2] / times[1]];
    let linear = ratios.iter().all(|r| (8.0..=12.0).contains(r));

    let (k, n) = (3000, 1_280_000);
    let started = Instant::now();
    let source = RandomLogits::new(k, n, 1.0, 11).unwrap();
    let cfg = SinkhornConfig {
        lambda: 25.0,
        tolerance: 1e-3,
        max_iterations: 2000,
        check_interval: 1,
    };
    let (_, report) = sinkhorn_scale(&source, &Marginals::equipartition(k, n).unwrap(), &cfg, None).unwrap();
    let wall = started.elapsed().as_secs_f64();
    verdict(
        linear && report.converged,
        format!(
            "K=100 s/iteration [{:.2e} {:.2e} {:.2e}], per-decade ratios [{:.2} {:.2}]; K=3000 N=1.28e6 tol 1e-3: {} after {} iterations, violation {:.1e}, {wall:.1} s on {} thread(s)",
            times[0],
            times[1],
            times[2],
            ratios[0],
            ratios[1],
            if report.converged { "converged" } else { "not converged" },
            report.iterations_run,
            report.final_marginal_violation,
            rayon::current_num_threads()
        ),
    )
}

fn a8() -> Verdict {
    let mut wins = [0usize; 3];
    for seed in SEEDS {
        let data = make_blobs(&BlobSpec::balanced(10, 3000, 16, 4.0, seed)).unwrap();
        let cfg = TrainConfig::desk(32, 1, 40, 4, seed);
        let rows = run_imbalance_suite_on(&data, &cfg, 0.3).unwrap();
        for (m, mode) in IMBALANCE_MODES.iter().enumerate() {
            let probe = |method| rows.iter().find(|r| r.mode == *mode && r.method == method).unwrap().probe;
            wins[m] += usize::from(probe(Method::Sinkhorn) > probe(Method::KMeans));
        }
    }
    let detail = IMBALANCE_MODES
        .iter()
        .zip(wins)
        .map(|(mode, w)| format!("{mode} {w}/5"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        wins.iter().all(|&w| w * 2 > SEEDS.len()),
        format!("Sinkhorn beats K-means on probe accuracy: {detail}"),
    )
}

fn a9() -> Verdict {
    let runs = a4_runs();
    let mut ok = 0;
    let mut pairs = Vec::new();
    for r in runs {
        let cfg = TrainConfig { heads: 3, ..r.cfg.clone() };
        let multi = self_label_train(&r.data, &cfg).unwrap();
        let best = head_selection_metrics(&multi.labels, r.data.truth().unwrap())
            .unwrap()
            .iter()
            .map(|m| m.nmi)
            .fold(f64::NEG_INFINITY, f64::max);
        ok += usize::from(best >= r.nmi - 0.02);
        pairs.push(format!("{:.3}/{best:.3}", r.nmi));
    }
    verdict(ok >= 4, format!("[4x1]/[4x3] best-head NMI [{}], {ok}/5 non-degraded", pairs.join(" ")))
}

fn a10() -> Verdict {
    let (mut steps, mut worst) = (0, f64::NEG_INFINITY);
    for seed in SEEDS {
        let data = make_blobs(&BlobSpec::balanced(4, 512, 16, 4.0, seed)).unwrap();
        let cfg = TrainConfig {
            method: Method::ExactOracle,
            ..TrainConfig::desk(4, 2, 20, 10, seed)
        };
        let run = self_label_train(&data, &cfg).unwrap();
        for u in run.record.label_updates() {
            steps += 1;
            worst = worst.max(u.objective_after - u.objective_before);
        }
    }
    verdict(worst <= 1e-10, format!("{steps} exact steps, largest objective change {worst:.3e}"))
}

fn main() {
    let criteria: [(&str, f64, fn() -> Verdict); 10] = [
        ("A1", 10.0, a1),
        ("A2", 30.0, a2),
        ("A3", f64::INFINITY, a3),
        ("A4", 120.0, a4),
        ("A5", 60.0, a5),
        ("A6", 120.0, a6),
        ("A7", f64::INFINITY, a7),
        ("A8", 600.0, a8),
        ("A9", f64::INFINITY, a9),
        ("A10", f64::INFINITY, a10),
    ];
    let only: Option<Vec<String>> = std::env::var("SL_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').map(|t| t.trim().to_uppercase()).collect());
    let strict = std::env::var("SL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = Vec::new();
    for (id, limit, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        // A4's shared runs are timed with A4, not with the criteria that reuse them.
        if matches!(id, "A6" | "A9") {
            a4_runs();
        }
        let started = Instant::now();
        let v = check();
        let seconds = started.elapsed().as_secs_f64();
        let in_time = seconds < limit;
        let pass = v.pass && in_time;
        let budget = if limit.is_finite() {
            format!(" (limit {limit:.0} s)")
        } else {
            String::new()
        };
        println!(
            "{id:<4}{} {seconds:.1} s{budget}: {}",
            if pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        if strict {
            std::process::exit(1);
        }
    }
}
