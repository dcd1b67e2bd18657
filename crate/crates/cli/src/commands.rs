use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use selflabel::data::{Dataset, Split};
use selflabel::io::{read_labels_csv, read_matrix_file, write_labels_csv};
use selflabel::model::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
use selflabel::oracle::{assignment_cost, solve_exact};
use selflabel::pipeline::{
    derive_seed, evaluate_features, head_selection_metrics, retrain_from_labels, run_imbalance_suite_on,
    self_label_train, write_imbalance_csv, ImbalanceRow, Method, TrainConfig, TrainOutcome, IMBALANCE_MODES,
};
use selflabel::sinkhorn::{sinkhorn_scale, RandomLogits};
use selflabel::{round_to_hard, sinkhorn_solve, Error, HardAssignment, LogPredictionMatrix, Marginals, SinkhornConfig};

use crate::exit::{usage, CliError, CliResult, Context, EXIT_IO, EXIT_NOT_CONVERGED};
use crate::options::DataSource;
use crate::{BenchArgs, EvalArgs, ImbalanceArgs, OracleArgs, RetrainArgs, SolveArgs, TrainArgs};

pub const RUNRECORD_VERSION: u32 = 1;
pub const SLFM_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const CHECKPOINT: &str = "model.slck";
const RUNRECORD: &str = "runrecord.jsonl";
const BENCH_LIMIT: f64 = 4e9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Formats {
    pub slfm: u32,
    pub slck: u32,
    pub runrecord: u32,
}

/// Everything needed to rebuild a run bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub formats: Formats,
    pub data: DataSource,
    pub config: TrainConfig,
    pub threads: usize,
    pub schedule: Vec<usize>,
    /// Run directory whose labels a retrain reused.
    pub labels_from: Option<PathBuf>,
    pub outputs: Vec<String>,
}

fn formats() -> Formats {
    Formats {
        slfm: SLFM_VERSION,
        slck: CHECKPOINT_VERSION,
        runrecord: RUNRECORD_VERSION,
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).context(path.display())?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn write_labels(path: &Path, labels: &[usize]) -> CliResult<()> {
    write_labels_csv(File::create(path).context(path.display())?, labels)?;
    Ok(())
}

/// Reads a K x N log-probability file. Anything wrong with the contents is
/// malformed input; only a mismatch with `--k` is a usage error.
fn load_log_p(path: &Path, k: Option<usize>) -> CliResult<LogPredictionMatrix> {
    let raw = read_matrix_file(path).map_err(|e| CliError {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    })?;
    if let Some(k) = k {
        if k != raw.rows {
            return Err(usage(format!("--k {k} but {} has {} rows", path.display(), raw.rows)));
        }
    }
    LogPredictionMatrix::from_row_major(raw.rows, raw.cols, &raw.values).map_err(|e| CliError {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    })
}

pub fn solve(a: &SolveArgs) -> CliResult<u8> {
    let log_p = load_log_p(&a.input, a.k)?;
    let config = SinkhornConfig {
        lambda: a.lambda,
        tolerance: a.tol,
        max_iterations: a.max_iter,
        ..SinkhornConfig::default()
    };
    config.validate()?;
    let marginals = Marginals::equipartition(log_p.classes(), log_p.points())?;
    let (plan, _, diag) = sinkhorn_solve(&log_p, &marginals, &config, None)?;
    let labels = round_to_hard(&plan);
    if let Some(out) = &a.out {
        write_labels(out, labels.labels())?;
    }
    let report = json!({
        "classes": log_p.classes(),
        "points": log_p.points(),
        "lambda": config.lambda,
        "tolerance": config.tolerance,
        "max_iterations": config.max_iterations,
        "diagnostics": diag,
        "counts": labels.counts(),
        "balance_deviation": labels.balance_deviation(),
        "balanced": labels.is_balanced(),
        "rounded_cost": assignment_cost(&log_p, labels.labels()),
    });
    if let Some(path) = &a.diag {
        write_json(path, &report)?;
    }
    println!(
        "iterations {} violation {:.3e} cost {:.9} converged {}",
        diag.iterations_run, diag.final_marginal_violation, diag.transport_cost, diag.converged
    );
    if diag.converged {
        Ok(0)
    } else {
        eprintln!("error: no convergence within {} iterations", config.max_iterations);
        Ok(EXIT_NOT_CONVERGED)
    }
}

pub fn oracle(a: &OracleArgs) -> CliResult<u8> {
    let log_p = load_log_p(&a.input, a.k)?;
    let marginals = Marginals::equipartition(log_p.classes(), log_p.points())?;
    let (labels, cost) = solve_exact(&log_p, &marginals)?;
    if let Some(out) = &a.out {
        write_labels(out, labels.labels())?;
    }
    if let Some(path) = &a.diag {
        write_json(
            path,
            &json!({
                "classes": log_p.classes(),
                "points": log_p.points(),
                "cost": cost,
                "counts": labels.counts(),
            }),
        )?;
    }
    println!("cost {cost:.12}");
    Ok(0)
}

fn labels_file(h: usize) -> String {
    format!("labels_{h}.csv")
}

fn write_run(
    out_dir: &Path,
    command: &str,
    source: &DataSource,
    data: &Dataset,
    outcome: &TrainOutcome,
    labels_from: Option<PathBuf>,
) -> CliResult<()> {
    fs::create_dir_all(out_dir).context(out_dir.display())?;
    let mut outputs = vec![MANIFEST.to_string(), RUNRECORD.to_string(), CHECKPOINT.to_string()];
    let mut ckpt = create(&out_dir.join(CHECKPOINT))?;
    write_checkpoint(&mut ckpt, &outcome.model)?;
    ckpt.flush()?;
    let mut rec = create(&out_dir.join(RUNRECORD))?;
    outcome.record.write_jsonl(&mut rec)?;
    rec.flush()?;
    for (h, labels) in outcome.labels.iter().enumerate() {
        write_labels(&out_dir.join(labels_file(h)), labels.labels())?;
        outputs.push(labels_file(h));
    }
    if let Some(truth) = data.truth() {
        let heads = head_selection_metrics(&outcome.labels, truth)?;
        write_json(&out_dir.join("heads.json"), &heads)?;
        outputs.push("heads.json".into());
        for m in &heads {
            println!("head {} nmi {:.4} ami {:.4} ari {:.4}", m.head, m.nmi, m.ami, m.ari);
        }
    }
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        formats: formats(),
        data: source.clone(),
        config: outcome.record.config.clone(),
        threads: rayon::current_num_threads(),
        schedule: outcome.record.schedule.clone(),
        labels_from,
        outputs,
    };
    write_json(&out_dir.join(MANIFEST), &manifest)?;
    println!("wrote {}", out_dir.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> CliResult<u8> {
    let opts = a.opts.with_config(a.config.as_deref())?;
    let source = opts.data_source()?;
    let data = source.load()?;
    let cfg = opts.train_config(data.truth().map(|t| t.k()))?;
    let train = data.part(Split::Train);
    let outcome = self_label_train(&train, &cfg)?;
    write_run(&a.out_dir, "train", &source, &train, &outcome, None)?;
    Ok(0)
}

fn read_manifest(run_dir: &Path) -> CliResult<RunManifest> {
    let path = run_dir.join(MANIFEST);
    let text = fs::read_to_string(&path).context(path.display())?;
    serde_json::from_str(&text).context(path.display())
}

fn read_run_labels(run_dir: &Path, manifest: &RunManifest, points: usize) -> CliResult<Vec<HardAssignment>> {
    (0..manifest.config.heads)
        .map(|h| {
            let path = run_dir.join(labels_file(h));
            let labels = read_labels_csv(File::open(&path).context(path.display())?).context(path.display())?;
            if labels.len() != points {
                let err: CliError = Error::DimensionMismatch {
                    context: "label file length",
                    expected: points,
                    found: labels.len(),
                }
                .into();
                return Err(CliError {
                    code: EXIT_IO,
                    message: format!("{}: {err}", path.display()),
                });
            }
            Ok(HardAssignment::new(labels, manifest.config.k).context(path.display())?)
        })
        .collect()
}

pub fn retrain(a: &RetrainArgs) -> CliResult<u8> {
    let manifest = read_manifest(&a.run_dir)?;
    let data = manifest.data.load()?;
    let train = data.part(Split::Train);
    let labels = read_run_labels(&a.run_dir, &manifest, train.len())?;
    let mut cfg = manifest.config.clone();
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        cfg.sgd.seed = seed;
    }
    if let Some(epochs) = a.epochs {
        cfg.sgd = selflabel::model::SgdConfig {
            weight_decay: cfg.sgd.weight_decay,
            learning_rate: cfg.sgd.learning_rate,
            batch_size: cfg.sgd.batch_size,
            momentum: cfg.sgd.momentum,
            ..selflabel::model::SgdConfig::desk_defaults(epochs, cfg.sgd.seed)
        };
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let outcome = retrain_from_labels(&train, &labels, &cfg)?;
    write_run(&a.out_dir, "retrain", &manifest.data, &train, &outcome, Some(a.run_dir.clone()))?;
    Ok(0)
}

pub fn eval(a: &EvalArgs) -> CliResult<u8> {
    let manifest = read_manifest(&a.run_dir)?;
    let data = manifest.data.load()?;
    let train = data.part(Split::Train);
    let held_out = data.part(Split::Test);
    let test = if held_out.is_empty() { &train } else { &held_out };
    let path = a.run_dir.join(CHECKPOINT);
    let model = read_checkpoint(File::open(&path).context(path.display())?).context(path.display())?;
    if model.architecture().input_dim != data.dim() {
        return Err(usage(format!(
            "checkpoint expects {} features, data has {}",
            model.architecture().input_dim,
            data.dim()
        )));
    }
    let labels = read_run_labels(&a.run_dir, &manifest, train.len())?;
    let heads = match train.truth() {
        Some(truth) => Some(head_selection_metrics(&labels, truth)?),
        None => None,
    };
    let scores = if train.truth().is_some() {
        Some(evaluate_features(&model, &train, test, derive_seed(manifest.config.seed, 12))?)
    } else {
        None
    };
    let report = json!({
        "run_dir": a.run_dir,
        "train_points": train.len(),
        "test_points": test.len(),
        "held_out": !held_out.is_empty(),
        "heads": heads,
        "features": scores,
    });
    let out = a.out.clone().unwrap_or_else(|| a.run_dir.join("eval.json"));
    write_json(&out, &report)?;
    if let Some(s) = scores {
        println!("knn {:.4} probe {:.4}", s.knn, s.probe);
    }
    for m in heads.iter().flatten() {
        println!("head {} nmi {:.4} ami {:.4} ari {:.4}", m.head, m.nmi, m.ami, m.ari);
    }
    Ok(0)
}

pub fn imbalance(a: ImbalanceArgs) -> CliResult<u8> {
    let opts = a.opts.with_config(a.config.as_deref())?;
    if a.seeds.is_empty() {
        return Err(usage("--seeds is empty"));
    }
    let test_fraction = opts.test_fraction.unwrap_or(0.3);
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(usage("--test-fraction must lie in (0, 1) for the imbalance suite"));
    }
    fs::create_dir_all(&a.out_dir).context(a.out_dir.display())?;
    let mut rows: Vec<ImbalanceRow> = Vec::new();
    let mut runs = Vec::new();
    for &seed in &a.seeds {
        let seeded = crate::options::TrainOpts {
            seed: Some(seed),
            test_fraction: Some(0.0),
            ..opts.clone()
        };
        let source = seeded.data_source()?;
        let data = source.load()?;
        let cfg = seeded.train_config(data.truth().map(|t| t.k()))?;
        let started = Instant::now();
        let seed_rows = run_imbalance_suite_on(&data, &cfg, test_fraction)?;
        for r in &seed_rows {
            println!(
                "seed {seed} {:>5} {:>12} knn {:.4} probe {:.4}",
                r.mode.to_string(),
                r.method.to_string(),
                r.knn,
                r.probe
            );
        }
        rows.extend(seed_rows);
        runs.push(json!({
            "seed": seed,
            "data": source,
            "config": cfg,
            "wall_seconds": started.elapsed().as_secs_f64(),
        }));
    }
    let mut csv = create(&a.out_dir.join("imbalance.csv"))?;
    write_imbalance_csv(&mut csv, &rows)?;
    csv.flush()?;
    let probe_of = |seed: u64, mode, method| {
        rows.iter()
            .find(|r| r.seed == seed && r.mode == mode && r.method == method)
            .map(|r| r.probe)
    };
    let mut summary = Vec::new();
    for mode in IMBALANCE_MODES {
        let wins = a
            .seeds
            .iter()
            .filter(|&&s| probe_of(s, mode, Method::Sinkhorn) > probe_of(s, mode, Method::KMeans))
            .count();
        println!("{mode}: sinkhorn beats kmeans on probe in {wins}/{} seeds", a.seeds.len());
        summary.push(json!({ "mode": mode, "sinkhorn_wins": wins, "seeds": a.seeds.len() }));
    }
    write_json(
        &a.out_dir.join(MANIFEST),
        &json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": "imbalance",
            "formats": formats(),
            "test_fraction": test_fraction,
            "threads": rayon::current_num_threads(),
            "runs": runs,
            "summary": summary,
            "outputs": ["manifest.json", "imbalance.csv"],
        }),
    )?;
    Ok(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub k: usize,
    pub n: usize,
    pub rep: usize,
    pub iterations: usize,
    pub seconds: f64,
    pub seconds_per_iteration: f64,
    pub converged: bool,
    pub violation: f64,
}

/// Least-squares slope of `ln t` against `ln(K N)`, over per-cell mean times.
pub fn scaling_exponent(rows: &[BenchRow]) -> Option<f64> {
    let mut cells: Vec<(usize, usize, f64, usize)> = Vec::new();
    for r in rows {
        match cells.iter_mut().find(|c| c.0 == r.k && c.1 == r.n) {
            Some(c) => {
                c.2 += r.seconds_per_iteration;
                c.3 += 1;
            }
            None => cells.push((r.k, r.n, r.seconds_per_iteration, 1)),
        }
    }
    let points: Vec<(f64, f64)> = cells
        .iter()
        .map(|&(k, n, t, c)| (((k * n) as f64).ln(), (t / c as f64).ln()))
        .collect();
    if points.len() < 2 {
        return None;
    }
    let m = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

pub fn bench(a: &BenchArgs) -> CliResult<u8> {
    for &k in &a.k {
        for &n in &a.n {
            if k == 0 || n == 0 {
                return Err(usage("--k and --n entries must be positive"));
            }
            if (k as f64) * (n as f64) > BENCH_LIMIT {
                return Err(usage(format!("K*N = {} exceeds the {BENCH_LIMIT:e} limit", k * n)));
            }
        }
    }
    let config = match a.tol {
        Some(tol) => SinkhornConfig {
            lambda: a.lambda,
            tolerance: tol,
            max_iterations: a.max_iter,
            ..SinkhornConfig::default()
        },
        None => SinkhornConfig {
            lambda: a.lambda,
            tolerance: f64::MIN_POSITIVE,
            max_iterations: a.iters,
            check_interval: a.iters.max(1),
        },
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let mut rows = Vec::new();
    if a.reps > 0 {
        for &k in &a.k {
            for &n in &a.n {
                let source = RandomLogits::new(k, n, a.scale, a.seed)?;
                let marginals = Marginals::equipartition(k, n)?;
                for rep in 0..a.reps {
                    let started = Instant::now();
                    let (_, report) = sinkhorn_scale(&source, &marginals, &config, None)?;
                    let seconds = started.elapsed().as_secs_f64();
                    let row = BenchRow {
                        k,
                        n,
                        rep,
                        iterations: report.iterations_run,
                        seconds,
                        seconds_per_iteration: seconds / report.iterations_run as f64,
                        converged: report.converged,
                        violation: report.final_marginal_violation,
                    };
                    eprintln!(
                        "k {k} n {n} rep {rep}: {} iterations, {:.4e} s/iteration",
                        row.iterations, row.seconds_per_iteration
                    );
                    rows.push(row);
                }
            }
        }
    }
    let mut out: Box<dyn Write> = match &a.out {
        Some(path) => Box::new(create(path)?),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(out, "k,n,rep,iterations,seconds,seconds_per_iteration,converged,violation")?;
    for r in &rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.k, r.n, r.rep, r.iterations, r.seconds, r.seconds_per_iteration, r.converged, r.violation
        )?;
    }
    out.flush()?;
    if let Some(slope) = scaling_exponent(&rows) {
        eprintln!("scaling exponent of time vs K*N: {slope:.3}");
    }
    Ok(0)
}
