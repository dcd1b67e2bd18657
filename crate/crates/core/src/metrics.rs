//! Objectives and evaluation scores. Everything is in nats.
//!
//! NMI is normalized by the arithmetic mean of the two entropies. AMI uses the
//! same normalization with the expected mutual information under the
//! hypergeometric (permutation) model; ARI is the Hubert-Arabie index.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::ot::{HardAssignment, LogPredictionMatrix, TransportPlan};

/// Labels in `[0, k)` for `N` points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    labels: Vec<usize>,
    k: usize,
}

impl Labeling {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
            return Err(invalid(format!("label {y} of point {i} is outside [0, {k})")));
        }
        Ok(Self { labels, k })
    }

    /// Uses `max(label) + 1` as the number of classes.
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        Self { labels, k }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

impl From<&HardAssignment> for Labeling {
    fn from(a: &HardAssignment) -> Self {
        Self {
            labels: a.labels().to_vec(),
            k: a.classes(),
        }
    }
}

/// Co-occurrence counts between two labelings of the same points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    rows: usize,
    cols: usize,
    counts: Vec<usize>,
    row_sums: Vec<usize>,
    col_sums: Vec<usize>,
    n: usize,
}

impl ContingencyTable {
    pub fn new(a: &Labeling, b: &Labeling) -> Result<Self> {
        check_dim("labeling lengths", a.len(), b.len())?;
        let (rows, cols) = (a.k(), b.k());
        let mut counts = vec![0; rows * cols];
        let mut row_sums = vec![0; rows];
        let mut col_sums = vec![0; cols];
        for (&x, &y) in a.labels().iter().zip(b.labels()) {
            counts[x * cols + y] += 1;
            row_sums[x] += 1;
            col_sums[y] += 1;
        }
        Ok(Self {
            rows,
            cols,
            counts,
            row_sums,
            col_sums,
            n: a.len(),
        })
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.counts[row * self.cols + col]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row_sums(&self) -> &[usize] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[usize] {
        &self.col_sums
    }

    /// Both labelings induce the same partition (up to renaming).
    pub fn same_partition(&self) -> bool {
        let rows_ok = (0..self.rows).all(|r| {
            (0..self.cols).filter(|&c| self.get(r, c) > 0).count() <= 1
        });
        let cols_ok = (0..self.cols).all(|c| {
            (0..self.rows).filter(|&r| self.get(r, c) > 0).count() <= 1
        });
        rows_ok && cols_ok
    }

    fn mutual_information(&self) -> f64 {
        let n = self.n as f64;
        let mut mi = 0.0;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let nij = self.get(r, c);
                if nij == 0 {
                    continue;
                }
                let nij = nij as f64;
                let expected = self.row_sums[r] as f64 * self.col_sums[c] as f64;
                mi += nij / n * (n * nij / expected).ln();
            }
        }
        mi.max(0.0)
    }
}

/// Shannon entropy (nats) of the empirical distribution of `counts`.
pub fn entropy_of_counts(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let neg: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum();
    // Subtracting from +0 keeps a single-class histogram at +0 rather than -0.
    0.0 - neg
}

/// `-(1/N) sum_i log p(y_i | x_i)`.
pub fn cross_entropy_hard(log_p: &LogPredictionMatrix, labels: &Labeling) -> Result<f64> {
    check_dim("labels vs prediction columns", log_p.points(), labels.len())?;
    let k = log_p.classes();
    let mut total = 0.0;
    for (i, &y) in labels.labels().iter().enumerate() {
        if y >= k {
            return Err(invalid(format!("label {y} of point {i} is outside [0, {k})")));
        }
        total -= log_p.get(y, i);
    }
    Ok(total / log_p.points() as f64)
}

/// `-(1/N) sum_i sum_y q(y|x_i) log p(y|x_i) = -sum Q_yi log p(y|x_i)`, which
/// equals the transport cost minus `log N`.
pub fn cross_entropy_soft(log_p: &LogPredictionMatrix, plan: &TransportPlan) -> Result<f64> {
    check_dim("plan rows vs predictions", log_p.classes(), plan.classes())?;
    check_dim("plan columns vs predictions", log_p.points(), plan.points())?;
    let mut total = 0.0;
    for (q_col, l_col) in plan
        .as_columns()
        .chunks_exact(plan.classes())
        .zip(log_p.as_columns().chunks_exact(log_p.classes()))
    {
        for (&q, &l) in q_col.iter().zip(l_col) {
            if q > 0.0 {
                total -= q * l;
            }
        }
    }
    Ok(total)
}

/// Mutual information between a deterministic label and the data index, which
/// reduces to the entropy of the label histogram.
pub fn mutual_information(labels: &Labeling) -> f64 {
    entropy_of_counts(&labels.counts())
}

pub fn nmi(a: &Labeling, b: &Labeling) -> Result<f64> {
    let table = ContingencyTable::new(a, b)?;
    let (ha, hb) = (entropy_of_counts(table.row_sums()), entropy_of_counts(table.col_sums()));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    Ok((table.mutual_information() / (0.5 * (ha + hb))).min(1.0))
}

fn log_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Expected mutual information of two random labelings with the table's margins.
fn expected_mutual_information(table: &ContingencyTable) -> f64 {
    let n = table.n;
    let nf = n as f64;
    let lf = log_factorials(n);
    let mut emi = 0.0;
    for &a in table.row_sums().iter().filter(|&&a| a > 0) {
        for &b in table.col_sums().iter().filter(|&&b| b > 0) {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            let fixed = lf[a] + lf[b] + lf[n - a] + lf[n - b] - lf[n];
            for nij in lo..=hi {
                let log_weight = fixed
                    - lf[nij]
                    - lf[a - nij]
                    - lf[b - nij]
                    - lf[n + nij - a - b];
                let x = nij as f64;
                emi += x / nf * (nf * x / (a as f64 * b as f64)).ln() * log_weight.exp();
            }
        }
    }
    emi
}

pub fn adjusted_nmi(a: &Labeling, b: &Labeling) -> Result<f64> {
    let table = ContingencyTable::new(a, b)?;
    let (ha, hb) = (entropy_of_counts(table.row_sums()), entropy_of_counts(table.col_sums()));
    let mi = table.mutual_information();
    let emi = expected_mutual_information(&table);
    let denom = 0.5 * (ha + hb) - emi;
    if denom.abs() < 1e-15 {
        return Ok(if table.same_partition() { 1.0 } else { 0.0 });
    }
    Ok((mi - emi) / denom)
}

fn pairs(x: usize) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

pub fn adjusted_rand(a: &Labeling, b: &Labeling) -> Result<f64> {
    let table = ContingencyTable::new(a, b)?;
    let index: f64 = table.counts.iter().map(|&c| pairs(c)).sum();
    let sa: f64 = table.row_sums().iter().map(|&c| pairs(c)).sum();
    let sb: f64 = table.col_sums().iter().map(|&c| pairs(c)).sum();
    let total = pairs(table.n);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max_index = 0.5 * (sa + sb);
    if (max_index - expected).abs() < 1e-12 {
        return Ok(if table.same_partition() { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max_index - expected))
}

/// Entropy of the true-label distribution inside each pseudo-class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoClassEntropy {
    pub entropy: Vec<f64>,
    /// Pseudo-classes with no members; their entropy is reported as 0.
    pub empty: Vec<bool>,
}

pub fn per_pseudoclass_entropy(pseudo: &Labeling, truth: &Labeling) -> Result<PseudoClassEntropy> {
    let table = ContingencyTable::new(pseudo, truth)?;
    let mut entropy = Vec::with_capacity(pseudo.k());
    let mut empty = Vec::with_capacity(pseudo.k());
    for r in 0..pseudo.k() {
        let row: Vec<usize> = (0..truth.k()).map(|c| table.get(r, c)).collect();
        empty.push(table.row_sums()[r] == 0);
        entropy.push(entropy_of_counts(&row));
    }
    Ok(PseudoClassEntropy { entropy, empty })
}
