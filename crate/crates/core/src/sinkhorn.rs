//! Entropically regularized transport between predicted label distributions
//! and the equipartition marginals, solved by log-domain Sinkhorn-Knopp scaling.
//!
//! The plan is `Q = diag(alpha) P^lambda diag(beta)`. With `lambda = 25` the
//! kernel `P^lambda` underflows in linear space for `p < e^-28`, so every
//! update is a logsumexp reduction over `lambda * log p + log alpha` (or
//! `+ log beta`). The `-lambda log N` shift between joint and conditional
//! probabilities is a constant and is absorbed into the duals.
//!
//! One iteration is a single sweep over the columns: for each point `i` the
//! column update `beta_i = c_i / [alpha^T P^lambda]_i` is computed from the
//! current `alpha`, and the row reductions `[P^lambda beta]_y` for the next
//! `alpha` are accumulated from the fresh `beta_i` in the same pass. After the
//! sweep the plan `(alpha, beta)` satisfies the column marginal exactly, so its
//! marginal violation is just the row-sum error and costs `O(K)` to check.
//!
//! Columns are processed in fixed blocks and partial row reductions are merged
//! in block order, so results do not depend on the number of rayon threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::ot::{argmax_lowest, HardAssignment, LogPredictionMatrix, Marginals, TransportPlan};

const BLOCK_COLUMNS: usize = 8192;
const FETCH_ENTRIES: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Inverse temperature of the KL regularizer.
    pub lambda: f64,
    /// Largest admissible absolute row/column-sum error.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Sweeps between convergence checks. The first sweep is always checked.
    pub check_interval: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 25.0,
            tolerance: 1e-6,
            max_iterations: 2000,
            check_interval: 10,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(invalid(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 || self.check_interval == 0 {
            return Err(invalid("max_iterations and check_interval must be positive"));
        }
        Ok(())
    }
}

/// Log-domain scaling coefficients `log alpha` (per label) and `log beta` (per point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingState {
    pub log_alpha: Vec<f64>,
    pub log_beta: Vec<f64>,
}

impl ScalingState {
    pub fn cold(classes: usize, points: usize) -> Self {
        Self {
            log_alpha: vec![0.0; classes],
            log_beta: vec![0.0; points],
        }
    }
}

/// Outcome of a scaling run that does not materialize the plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub iterations_run: usize,
    pub final_marginal_violation: f64,
    pub converged: bool,
    pub warm_started: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub iterations_run: usize,
    pub final_marginal_violation: f64,
    pub regularized_objective: f64,
    pub transport_cost: f64,
    pub warm_started: bool,
    /// False when `max_iterations` was reached before the tolerance.
    pub converged: bool,
}

/// Column-wise access to `log p(y | x_i)` for solvers that only ever sweep columns.
pub trait LogProbSource: Sync {
    fn classes(&self) -> usize;
    fn points(&self) -> usize;
    /// Point-major values for columns `start..start + count`. May borrow from
    /// `scratch` when the values are generated on the fly.
    fn columns<'a>(&'a self, start: usize, count: usize, scratch: &'a mut Vec<f64>) -> &'a [f64];
}

impl LogProbSource for LogPredictionMatrix {
    fn classes(&self) -> usize {
        LogPredictionMatrix::classes(self)
    }

    fn points(&self) -> usize {
        LogPredictionMatrix::points(self)
    }

    fn columns<'a>(&'a self, start: usize, count: usize, _scratch: &'a mut Vec<f64>) -> &'a [f64] {
        let k = LogPredictionMatrix::classes(self);
        &self.as_columns()[start * k..(start + count) * k]
    }
}

/// Seeded pseudo-random predictions generated on demand, for problems too large
/// to hold in memory: `log p(y|x_i) = scale * u(y, i) - log Z_i` with `u`
/// uniform on `[0, 1)` from a counter-based hash. Only the `N` column
/// normalizers are stored.
#[derive(Debug, Clone)]
pub struct RandomLogits {
    classes: usize,
    points: usize,
    seed: u64,
    scale: f64,
    normalizers: Vec<f64>,
}

impl RandomLogits {
    pub fn new(classes: usize, points: usize, scale: f64, seed: u64) -> Result<Self> {
        if classes == 0 || points == 0 {
            return Err(invalid("random logits need positive dimensions"));
        }
        let mut src = Self {
            classes,
            points,
            seed,
            scale,
            normalizers: Vec::new(),
        };
        let mut normalizers = vec![0.0; points];
        normalizers
            .par_chunks_mut(BLOCK_COLUMNS)
            .enumerate()
            .for_each(|(b, out)| {
                let mut col = vec![0.0; classes];
                for (j, z) in out.iter_mut().enumerate() {
                    let i = b * BLOCK_COLUMNS + j;
                    for (y, v) in col.iter_mut().enumerate() {
                        *v = src.logit(y, i);
                    }
                    *z = crate::matrix::logsumexp(&col);
                }
            });
        src.normalizers = normalizers;
        Ok(src)
    }

    #[inline]
    fn logit(&self, label: usize, point: usize) -> f64 {
        let counter = (point as u64)
            .wrapping_mul(self.classes as u64)
            .wrapping_add(label as u64);
        let bits = splitmix64(self.seed ^ counter.wrapping_mul(0xA076_1D64_78BD_642F));
        self.scale * ((bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
    }

    /// Materializes the matrix; only sensible at small sizes.
    pub fn to_matrix(&self) -> Result<LogPredictionMatrix> {
        let mut scratch = Vec::new();
        let values = self.columns(0, self.points, &mut scratch).to_vec();
        LogPredictionMatrix::from_columns(self.classes, self.points, values)
    }
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl LogProbSource for RandomLogits {
    fn classes(&self) -> usize {
        self.classes
    }

    fn points(&self) -> usize {
        self.points
    }

    fn columns<'a>(&'a self, start: usize, count: usize, scratch: &'a mut Vec<f64>) -> &'a [f64] {
        scratch.clear();
        scratch.reserve(count * self.classes);
        for i in start..start + count {
            let z = self.normalizers[i];
            scratch.extend((0..self.classes).map(|y| self.logit(y, i) - z));
        }
        scratch
    }
}

/// Running `(max, sum exp(x - max))` pair for a streaming logsumexp.
#[derive(Debug, Clone, Copy)]
struct Lse {
    max: f64,
    sum: f64,
}

impl Lse {
    const EMPTY: Lse = Lse {
        max: f64::NEG_INFINITY,
        sum: 0.0,
    };

    #[inline]
    fn push(&mut self, x: f64) {
        if x > self.max {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.sum += (x - self.max).exp();
        }
    }

    fn merge(&mut self, other: Lse) {
        if other.max == f64::NEG_INFINITY {
            return;
        }
        if other.max > self.max {
            self.sum = self.sum * (self.max - other.max).exp() + other.sum;
            self.max = other.max;
        } else {
            self.sum += other.sum * (other.max - self.max).exp();
        }
    }

    fn value(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

/// One fused sweep: overwrites `log_beta` from `log_alpha` and returns
/// `log [P^lambda beta]_y` for the new `beta`.
fn sweep<S: LogProbSource>(
    source: &S,
    lambda: f64,
    log_alpha: &[f64],
    log_col: &[f64],
    log_beta: &mut [f64],
) -> Vec<f64> {
    let k = source.classes();
    let fetch = (FETCH_ENTRIES / k).max(1);
    let partials: Vec<Vec<Lse>> = log_beta
        .par_chunks_mut(BLOCK_COLUMNS)
        .enumerate()
        .map(|(block, beta_block)| {
            let first = block * BLOCK_COLUMNS;
            let mut acc = vec![Lse::EMPTY; k];
            let mut scratch = Vec::new();
            let mut offset = 0;
            while offset < beta_block.len() {
                let count = fetch.min(beta_block.len() - offset);
                let cols = source.columns(first + offset, count, &mut scratch);
                for (j, col) in cols.chunks_exact(k).enumerate() {
                    let i = first + offset + j;
                    let mut m = f64::NEG_INFINITY;
                    for (l, a) in col.iter().zip(log_alpha) {
                        m = m.max(lambda * l + a);
                    }
                    let s: f64 = col
                        .iter()
                        .zip(log_alpha)
                        .map(|(l, a)| (lambda * l + a - m).exp())
                        .sum();
                    let lb = log_col[i] - (m + s.ln());
                    beta_block[offset + j] = lb;
                    for (r, l) in acc.iter_mut().zip(col) {
                        r.push(lambda * l + lb);
                    }
                }
                offset += count;
            }
            acc
        })
        .collect();
    let mut total = vec![Lse::EMPTY; k];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.merge(p);
        }
    }
    total.iter().map(Lse::value).collect()
}

/// Runs Sinkhorn-Knopp scaling on any column source without materializing the plan.
///
/// Returns the final (or, when `max_iterations` is hit, the best checked)
/// scaling state. Its column marginal is exact; the reported violation is the
/// row-sum error.
pub fn sinkhorn_scale<S: LogProbSource>(
    source: &S,
    marginals: &Marginals,
    config: &SinkhornConfig,
    warm: Option<&ScalingState>,
) -> Result<(ScalingState, ScalingReport)> {
    config.validate()?;
    let (k, n) = (source.classes(), source.points());
    check_dim("row marginal length", k, marginals.classes())?;
    check_dim("column marginal length", n, marginals.points())?;
    let mut log_alpha = match warm {
        Some(state) => {
            check_dim("warm-start alpha length", k, state.log_alpha.len())?;
            check_dim("warm-start beta length", n, state.log_beta.len())?;
            if state.log_alpha.iter().any(|v| !v.is_finite()) {
                return Err(invalid("warm-start state has non-finite entries"));
            }
            state.log_alpha.clone()
        }
        None => vec![0.0; k],
    };
    let log_row: Vec<f64> = marginals.row().iter().map(|r| r.ln()).collect();
    let log_col: Vec<f64> = marginals.col().iter().map(|c| c.ln()).collect();
    let mut log_beta = vec![0.0; n];
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;

    for iteration in 1..=config.max_iterations {
        let row_lse = sweep(source, config.lambda, &log_alpha, &log_col, &mut log_beta);
        if log_beta.iter().any(|v| !v.is_finite()) || row_lse.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteDual { iteration });
        }
        let checked = iteration == 1
            || iteration % config.check_interval == 0
            || iteration == config.max_iterations;
        if checked {
            let violation = log_alpha
                .iter()
                .zip(&row_lse)
                .zip(marginals.row())
                .map(|((a, s), r)| ((a + s).exp() - r).abs())
                .fold(0.0, f64::max);
            if violation <= config.tolerance {
                return Ok((
                    ScalingState {
                        log_alpha,
                        log_beta,
                    },
                    ScalingReport {
                        iterations_run: iteration,
                        final_marginal_violation: violation,
                        converged: true,
                        warm_started: warm.is_some(),
                    },
                ));
            }
            if best.as_ref().map_or(true, |(v, _, _)| violation < *v) {
                best = Some((violation, log_alpha.clone(), log_beta.clone()));
            }
        }
        for ((a, lr), s) in log_alpha.iter_mut().zip(&log_row).zip(&row_lse) {
            *a = lr - s;
        }
    }
    let (violation, log_alpha, log_beta) = best.expect("max_iterations >= 1 guarantees a check");
    Ok((
        ScalingState {
            log_alpha,
            log_beta,
        },
        ScalingReport {
            iterations_run: config.max_iterations,
            final_marginal_violation: violation,
            converged: false,
            warm_started: warm.is_some(),
        },
    ))
}

/// Solves the regularized transport problem for an in-memory prediction matrix
/// and materializes the plan `exp(lambda log p + log alpha + log beta)`.
pub fn sinkhorn_solve(
    log_p: &LogPredictionMatrix,
    marginals: &Marginals,
    config: &SinkhornConfig,
    warm: Option<&ScalingState>,
) -> Result<(TransportPlan, ScalingState, SolveDiagnostics)> {
    let (state, report) = sinkhorn_scale(log_p, marginals, config, warm)?;
    let k = log_p.classes();
    let mut values = Vec::with_capacity(log_p.as_columns().len());
    for (i, col) in log_p.as_columns().chunks_exact(k).enumerate() {
        let lb = state.log_beta[i];
        values.extend(
            col.iter()
                .zip(&state.log_alpha)
                .map(|(l, a)| (config.lambda * l + a + lb).exp()),
        );
    }
    let plan = TransportPlan::from_columns(values, marginals.clone())?;
    let cost = transport_cost(&plan, log_p)?;
    let objective = regularized_objective(&plan, log_p, config.lambda)?;
    let diagnostics = SolveDiagnostics {
        iterations_run: report.iterations_run,
        final_marginal_violation: plan.marginal_violation(),
        regularized_objective: objective,
        transport_cost: cost,
        warm_started: report.warm_started,
        converged: report.converged,
    };
    Ok((plan, state, diagnostics))
}

/// Column argmax of the plan, ties toward the lowest label.
pub fn round_to_hard(plan: &TransportPlan) -> HardAssignment {
    let labels = (0..plan.points())
        .map(|i| argmax_lowest(plan.column(i)))
        .collect();
    HardAssignment::new(labels, plan.classes()).expect("argmax labels are in range")
}

fn check_plan_dims(plan: &TransportPlan, log_p: &LogPredictionMatrix) -> Result<()> {
    check_dim("plan rows vs predictions", log_p.classes(), plan.classes())?;
    check_dim("plan columns vs predictions", log_p.points(), plan.points())
}

/// `<Q, -log P_joint> = sum Q_yi (log N - log p(y|x_i))`; zero entries of `Q`
/// contribute nothing.
pub fn transport_cost(plan: &TransportPlan, log_p: &LogPredictionMatrix) -> Result<f64> {
    check_plan_dims(plan, log_p)?;
    let log_n = (log_p.points() as f64).ln();
    let mut total = 0.0;
    for (q_col, l_col) in plan
        .as_columns()
        .chunks_exact(plan.classes())
        .zip(log_p.as_columns().chunks_exact(log_p.classes()))
    {
        for (&q, &l) in q_col.iter().zip(l_col) {
            if q > 0.0 {
                total += q * (log_n - l);
            }
        }
    }
    Ok(total)
}

/// Transport cost plus `(1/lambda) KL(Q || r c^T)`, with `0 log 0 = 0`.
pub fn regularized_objective(
    plan: &TransportPlan,
    log_p: &LogPredictionMatrix,
    lambda: f64,
) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(invalid(format!("lambda must be positive, got {lambda}")));
    }
    let cost = transport_cost(plan, log_p)?;
    let marg = plan.marginals();
    let mut kl = 0.0;
    for (i, col) in plan.as_columns().chunks_exact(plan.classes()).enumerate() {
        let c = marg.col()[i];
        for (&q, &r) in col.iter().zip(marg.row()) {
            if q > 0.0 {
                kl += q * (q / (r * c)).ln();
            }
        }
    }
    Ok(cost + kl / lambda)
}
