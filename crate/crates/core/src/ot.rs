//! Probability, marginal, transport-plan and assignment value types.
//!
//! Matrices indexed `(label y, point i)` are stored point-major: the `K`
//! entries of column `i` are contiguous. Solvers sweep one column at a time,
//! so that is the layout every hot loop wants.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::matrix::{compensated_sum, logsumexp};

/// Entries below this are clamped so `exp` never underflows to an exact zero
/// that would lose the ordering between very unlikely labels.
pub const LOG_CLAMP: f64 = -700.0;

/// Columns whose log-normalizer deviates from zero by more than this are renormalized.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// `K x N` matrix of `log p(y | x_i)` in nats. Every column is a normalized
/// log distribution and every entry is finite and at least [`LOG_CLAMP`].
///
/// The joint matrix `log P_yi = log p(y|x_i) - log N` is never stored; the
/// `1/N` factor is applied analytically where costs are computed.
#[derive(Debug, Clone, PartialEq)]
pub struct LogPredictionMatrix {
    classes: usize,
    points: usize,
    values: Vec<f64>,
}

impl LogPredictionMatrix {
    /// Validates a row-major `classes x points` matrix (row `y`, column `i`).
    pub fn from_row_major(classes: usize, points: usize, row_major: &[f64]) -> Result<Self> {
        check_dim("log-prediction entries", classes * points, row_major.len())?;
        let mut values = vec![0.0; classes * points];
        for y in 0..classes {
            for i in 0..points {
                values[i * classes + y] = row_major[y * points + i];
            }
        }
        Self::from_columns(classes, points, values)
    }

    /// Validates point-major values: entry `(y, i)` at `i * classes + y`.
    pub fn from_columns(classes: usize, points: usize, mut values: Vec<f64>) -> Result<Self> {
        if classes == 0 || points == 0 {
            return Err(invalid("log-prediction matrix needs at least one row and one column"));
        }
        check_dim("log-prediction entries", classes * points, values.len())?;
        for (idx, v) in values.iter_mut().enumerate() {
            let (row, col) = (idx % classes, idx / classes);
            if v.is_nan() {
                return Err(Error::NotANumber { row, col });
            }
            if *v == f64::INFINITY {
                return Err(Error::NonFinite { row, col, value: *v });
            }
            if *v < LOG_CLAMP {
                *v = LOG_CLAMP;
            }
        }
        for column in values.chunks_exact_mut(classes) {
            let norm = logsumexp(column);
            if norm.abs() > NORMALIZATION_TOLERANCE {
                for v in column.iter_mut() {
                    *v = (*v - norm).max(LOG_CLAMP);
                }
            }
        }
        Ok(Self {
            classes,
            points,
            values,
        })
    }

    /// Takes the logarithm of a row-major probability matrix and validates it.
    pub fn from_probabilities(classes: usize, points: usize, row_major: &[f64]) -> Result<Self> {
        let logs: Vec<f64> = row_major.iter().map(|p| p.ln()).collect();
        Self::from_row_major(classes, points, &logs)
    }

    pub fn uniform(classes: usize, points: usize) -> Self {
        Self {
            classes,
            points,
            values: vec![-(classes as f64).ln(); classes * points],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn get(&self, label: usize, point: usize) -> f64 {
        self.values[point * self.classes + label]
    }

    /// `log p(. | x_i)` for one point.
    pub fn column(&self, point: usize) -> &[f64] {
        &self.values[point * self.classes..(point + 1) * self.classes]
    }

    pub fn as_columns(&self) -> &[f64] {
        &self.values
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.values.len()];
        for i in 0..self.points {
            for y in 0..self.classes {
                out[y * self.points + i] = self.values[i * self.classes + y];
            }
        }
        out
    }

    /// Label with the highest log-probability in column `i`, lowest index on ties.
    pub fn argmax(&self, point: usize) -> usize {
        argmax_lowest(self.column(point))
    }
}

/// Validates a raw row-major `classes x points` matrix into a [`LogPredictionMatrix`].
pub fn validate_log_predictions(
    classes: usize,
    points: usize,
    row_major: &[f64],
) -> Result<LogPredictionMatrix> {
    LogPredictionMatrix::from_row_major(classes, points, row_major)
}

pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (idx, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = idx;
        }
    }
    best
}

/// Row marginal `r` (length `K`) and column marginal `c` (length `N`) of a transport plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    row: Vec<f64>,
    col: Vec<f64>,
}

impl Marginals {
    pub fn new(row: Vec<f64>, col: Vec<f64>) -> Result<Self> {
        for (name, v) in [("row", &row), ("column", &col)] {
            if v.is_empty() {
                return Err(invalid(format!("{name} marginal is empty")));
            }
            if let Some(bad) = v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                return Err(invalid(format!("{name} marginal entry {bad} is not strictly positive")));
            }
            let total = compensated_sum(v.iter().copied());
            if (total - 1.0).abs() > 1e-12 {
                return Err(invalid(format!("{name} marginal sums to {total}, not 1")));
            }
        }
        Ok(Self { row, col })
    }

    /// Uniform column marginal `1/N`; the lowest `N mod K` classes get capacity
    /// `floor(N/K) + 1`, the rest `floor(N/K)`.
    pub fn equipartition(classes: usize, points: usize) -> Result<Self> {
        let caps = equipartition_capacities(classes, points)?;
        let n = points as f64;
        let row = caps.iter().map(|&c| c as f64 / n).collect();
        Ok(Self {
            row,
            col: vec![1.0 / n; points],
        })
    }

    pub fn row(&self) -> &[f64] {
        &self.row
    }

    pub fn col(&self) -> &[f64] {
        &self.col
    }

    pub fn classes(&self) -> usize {
        self.row.len()
    }

    pub fn points(&self) -> usize {
        self.col.len()
    }

    /// Integer class capacities `r_y * N` when the column marginal is uniform and
    /// every `r_y * N` is an integer (within `1e-9`).
    pub fn capacities(&self) -> Result<Vec<usize>> {
        let n = self.points() as f64;
        if self.col.iter().any(|&c| (c * n - 1.0).abs() > 1e-9) {
            return Err(Error::Infeasible(
                "hard assignments need a uniform column marginal".into(),
            ));
        }
        let mut caps = Vec::with_capacity(self.row.len());
        for (y, &r) in self.row.iter().enumerate() {
            let scaled = r * n;
            let rounded = scaled.round();
            if (scaled - rounded).abs() > 1e-9 || rounded < 1.0 {
                return Err(Error::Infeasible(format!(
                    "class {y} capacity {scaled} is not a positive integer"
                )));
            }
            caps.push(rounded as usize);
        }
        Ok(caps)
    }
}

/// Class sizes of the equipartition of `points` items into `classes` labels.
pub fn equipartition_capacities(classes: usize, points: usize) -> Result<Vec<usize>> {
    if classes == 0 {
        return Err(invalid("number of classes must be positive"));
    }
    if points < classes {
        return Err(Error::Infeasible(format!(
            "{points} points cannot fill {classes} non-empty classes"
        )));
    }
    let base = points / classes;
    let extra = points % classes;
    Ok((0..classes).map(|y| base + usize::from(y < extra)).collect())
}

pub fn make_equipartition_marginals(classes: usize, points: usize) -> Result<Marginals> {
    Marginals::equipartition(classes, points)
}

/// Nonnegative `K x N` matrix in the transportation polytope of its marginals
/// (up to the recorded violation), stored point-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    classes: usize,
    points: usize,
    values: Vec<f64>,
    marginals: Marginals,
    marginal_violation: f64,
}

impl TransportPlan {
    /// Builds a plan from point-major values, measuring its marginal violation.
    pub fn from_columns(values: Vec<f64>, marginals: Marginals) -> Result<Self> {
        let (classes, points) = (marginals.classes(), marginals.points());
        check_dim("transport plan entries", classes * points, values.len())?;
        if let Some(pos) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid(format!(
                "transport plan entry ({}, {}) = {} is not a nonnegative number",
                pos % classes,
                pos / classes,
                values[pos]
            )));
        }
        let mass = compensated_sum(values.iter().copied());
        if (mass - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("transport plan mass {mass} is not 1")));
        }
        let marginal_violation = marginal_violation(classes, &values, &marginals);
        Ok(Self {
            classes,
            points,
            values,
            marginals,
            marginal_violation,
        })
    }

    /// The plan placing mass `c_i` on `(labels[i], i)`.
    pub fn from_assignment(assignment: &HardAssignment, marginals: Marginals) -> Result<Self> {
        check_dim("assignment length", marginals.points(), assignment.len())?;
        check_dim("assignment classes", marginals.classes(), assignment.classes())?;
        let classes = marginals.classes();
        let mut values = vec![0.0; classes * marginals.points()];
        for (i, &y) in assignment.labels().iter().enumerate() {
            values[i * classes + y] = marginals.col()[i];
        }
        Self::from_columns(values, marginals)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn get(&self, label: usize, point: usize) -> f64 {
        self.values[point * self.classes + label]
    }

    pub fn column(&self, point: usize) -> &[f64] {
        &self.values[point * self.classes..(point + 1) * self.classes]
    }

    pub fn as_columns(&self) -> &[f64] {
        &self.values
    }

    pub fn marginals(&self) -> &Marginals {
        &self.marginals
    }

    /// Largest absolute row- or column-sum error against the marginals.
    pub fn marginal_violation(&self) -> f64 {
        self.marginal_violation
    }
}

fn marginal_violation(classes: usize, values: &[f64], marginals: &Marginals) -> f64 {
    let mut rows = vec![0.0; classes];
    let mut worst = 0.0f64;
    for (column, &c) in values.chunks_exact(classes).zip(marginals.col()) {
        let mut s = 0.0;
        for (acc, &q) in rows.iter_mut().zip(column) {
            *acc += q;
            s += q;
        }
        worst = worst.max((s - c).abs());
    }
    for (s, r) in rows.iter().zip(marginals.row()) {
        worst = worst.max((s - r).abs());
    }
    worst
}

/// One label per point plus per-class counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardAssignment {
    labels: Vec<usize>,
    counts: Vec<usize>,
    balanced: bool,
}

impl HardAssignment {
    pub fn new(labels: Vec<usize>, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(invalid("number of classes must be positive"));
        }
        let mut counts = vec![0usize; classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(invalid(format!("label {y} of point {i} is outside [0, {classes})")));
            }
            counts[y] += 1;
        }
        let n = labels.len();
        let floor = n / classes;
        let balanced = counts.iter().all(|&c| c == floor || c == floor + 1);
        Ok(Self {
            labels,
            counts,
            balanced,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Every class count is `floor(N/K)` or `floor(N/K) + 1`.
    pub fn is_balanced(&self) -> bool {
        self.balanced
    }

    /// Fraction of points carrying the most frequent label.
    pub fn max_share(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        *self.counts.iter().max().unwrap_or(&0) as f64 / self.labels.len() as f64
    }

    /// Largest distance of a class count from the nearest admissible balanced count.
    pub fn balance_deviation(&self) -> usize {
        let floor = self.labels.len() / self.classes();
        self.counts
            .iter()
            .map(|&c| {
                if c < floor {
                    floor - c
                } else {
                    c.saturating_sub(floor + 1)
                }
            })
            .max()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equipartition_examples() {
        let m = Marginals::equipartition(2, 4).unwrap();
        assert_eq!(m.row(), &[0.5, 0.5]);
        assert_eq!(m.col(), &[0.25; 4]);

        let m = Marginals::equipartition(3, 10).unwrap();
        assert_eq!(m.row(), &[0.4, 0.3, 0.3]);
        assert_eq!(m.capacities().unwrap(), vec![4, 3, 3]);

        let m = Marginals::equipartition(1, 5).unwrap();
        assert_eq!(m.row(), &[1.0]);
        assert_eq!(m.col(), &[0.2; 5]);
    }

    #[test]
    fn equipartition_rejects_too_few_points() {
        assert!(matches!(
            Marginals::equipartition(4, 3),
            Err(Error::Infeasible(_))
        ));
        assert!(Marginals::equipartition(0, 3).is_err());
    }

    #[test]
    fn uniform_log_matrix_is_unchanged() {
        let h = 0.5f64.ln();
        let m = validate_log_predictions(2, 2, &[h, h, h, h]).unwrap();
        assert_eq!(m.as_columns(), &[h, h, h, h]);
    }

    #[test]
    fn slightly_unnormalized_column_is_renormalized() {
        // column 0 sums to 0.999 in probability space
        let raw = [0.6f64.ln(), 0.5f64.ln(), 0.399f64.ln(), 0.5f64.ln()];
        let m = validate_log_predictions(2, 2, &raw).unwrap();
        let shift = (0.999f64).ln();
        assert!((m.get(0, 0) - (0.6f64.ln() - shift)).abs() < 1e-15);
        assert!((m.get(1, 0) - (0.399f64.ln() - shift)).abs() < 1e-15);
        for i in 0..2 {
            assert!(logsumexp(m.column(i)).abs() < 1e-12);
        }
        assert_eq!(m.get(0, 1), 0.5f64.ln());
    }

    #[test]
    fn nan_is_reported_with_location() {
        let raw = [0.0, 0.0, -1.0, f64::NAN];
        match validate_log_predictions(2, 2, &raw) {
            Err(Error::NotANumber { row, col }) => assert_eq!((row, col), (1, 1)),
            other => panic!("expected NaN error, got {other:?}"),
        }
    }

    #[test]
    fn very_negative_entries_are_clamped() {
        let m = LogPredictionMatrix::from_columns(2, 1, vec![0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(m.get(1, 0), LOG_CLAMP);
        assert_eq!(m.get(0, 0), 0.0);
    }

    #[test]
    fn hard_assignment_counts_and_balance() {
        let a = HardAssignment::new(vec![0, 2, 1, 0], 3).unwrap();
        assert_eq!(a.counts(), &[2, 1, 1]);
        assert!(a.is_balanced());
        let b = HardAssignment::new(vec![0, 0, 0, 1], 2).unwrap();
        assert!(!b.is_balanced());
        assert_eq!(b.balance_deviation(), 1);
        assert_eq!(b.max_share(), 0.75);
        assert!(HardAssignment::new(vec![3], 3).is_err());
    }

    #[test]
    fn plan_from_assignment_is_feasible() {
        let marg = Marginals::equipartition(2, 4).unwrap();
        let a = HardAssignment::new(vec![0, 1, 1, 0], 2).unwrap();
        let q = TransportPlan::from_assignment(&a, marg).unwrap();
        assert_eq!(q.marginal_violation(), 0.0);
        assert_eq!(q.get(1, 1), 0.25);
    }
}
