//! Exact solver for the balanced assignment linear program at verification scale.
//!
//! Class `y` with capacity `n_y` is expanded into `n_y` identical slots, which
//! turns the transportation problem with integer capacities into an `N x N`
//! assignment problem solved by the shortest-augmenting-path Hungarian method.
//! Among equal-cost optima the lexicographically smallest label vector is
//! returned: every optimal assignment uses only edges that are tight under the
//! Hungarian dual, so a greedy pass over points reroutes along alternating
//! paths of tight edges to lower each label while keeping the optimum.

use std::collections::VecDeque;

use crate::error::{check_dim, Error, Result};
use crate::ot::{HardAssignment, LogPredictionMatrix, Marginals};

/// Largest `N` accepted by [`solve_exact`].
pub const MAX_EXACT_POINTS: usize = 4096;
/// Largest number of assignments [`brute_force_exact`] will enumerate.
pub const MAX_ENUMERATED: f64 = 1e6;

/// The `N x N` slot-expanded cost matrix. Row `i` is a point, slot `j` belongs
/// to class `class_of(j)` and costs `-log p(class_of(j) | x_i)`. Entries are
/// looked up from the `K x N` costs rather than stored.
#[derive(Debug, Clone)]
pub struct ExpandedCostMatrix {
    classes: usize,
    costs: Vec<f64>,
    slot_class: Vec<usize>,
}

impl ExpandedCostMatrix {
    pub fn new(log_p: &LogPredictionMatrix, capacities: &[usize]) -> Result<Self> {
        check_dim("capacity vector", log_p.classes(), capacities.len())?;
        let total: usize = capacities.iter().sum();
        check_dim("total capacity", log_p.points(), total)?;
        let slot_class = capacities
            .iter()
            .enumerate()
            .flat_map(|(y, &c)| std::iter::repeat(y).take(c))
            .collect();
        Ok(Self {
            classes: log_p.classes(),
            costs: log_p.as_columns().iter().map(|l| -l).collect(),
            slot_class,
        })
    }

    pub fn size(&self) -> usize {
        self.slot_class.len()
    }

    pub fn class_of(&self, slot: usize) -> usize {
        self.slot_class[slot]
    }

    /// Cost of sending point `row` to class `label`.
    pub fn class_cost(&self, row: usize, label: usize) -> f64 {
        self.costs[row * self.classes + label]
    }

    pub fn get(&self, row: usize, slot: usize) -> f64 {
        self.class_cost(row, self.slot_class[slot])
    }
}

/// Canonical cost of a hard assignment: `sum_i (1/N)(log N - log p(y_i|x_i))`
/// accumulated in point order. Equals the transport cost of the induced plan.
pub fn assignment_cost(log_p: &LogPredictionMatrix, labels: &[usize]) -> f64 {
    let n = log_p.points() as f64;
    let (w, log_n) = (1.0 / n, n.ln());
    labels
        .iter()
        .enumerate()
        .fold(0.0, |acc, (i, &y)| acc + w * (log_n - log_p.get(y, i)))
}

fn capacities_for(log_p: &LogPredictionMatrix, marginals: &Marginals) -> Result<Vec<usize>> {
    check_dim("row marginal length", log_p.classes(), marginals.classes())?;
    check_dim("column marginal length", log_p.points(), marginals.points())?;
    marginals.capacities()
}

/// Globally optimal balanced hard assignment and its cost.
pub fn solve_exact(
    log_p: &LogPredictionMatrix,
    marginals: &Marginals,
) -> Result<(HardAssignment, f64)> {
    let n = log_p.points();
    if n > MAX_EXACT_POINTS {
        return Err(Error::TooLarge(format!(
            "exact solver accepts at most {MAX_EXACT_POINTS} points, got {n}"
        )));
    }
    let caps = capacities_for(log_p, marginals)?;
    let expanded = ExpandedCostMatrix::new(log_p, &caps)?;
    let (slot_of_row, u, v) = hungarian(&expanded);
    let k = log_p.classes();
    let mut labels: Vec<usize> = slot_of_row.iter().map(|&s| expanded.class_of(s)).collect();

    // All slots of one class are matched, so their duals coincide up to rounding.
    let mut class_dual = vec![f64::NEG_INFINITY; k];
    for (s, &vs) in v.iter().enumerate() {
        let y = expanded.class_of(s);
        class_dual[y] = class_dual[y].max(vs);
    }
    let scale = expanded.costs.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-10 * scale;
    let tight = |i: usize, y: usize| expanded.class_cost(i, y) - u[i] - class_dual[y] <= tol;
    lexicographic_repair(&mut labels, k, tight);

    let cost = assignment_cost(log_p, &labels);
    Ok((HardAssignment::new(labels, k)?, cost))
}

/// Greedily lowers each point's label, in point order, whenever a tight
/// alternating path through later points frees capacity in the smaller class.
fn lexicographic_repair(labels: &mut [usize], classes: usize, tight: impl Fn(usize, usize) -> bool) {
    let n = labels.len();
    for i in 0..n {
        for target in 0..labels[i] {
            if !tight(i, target) {
                continue;
            }
            if let Some(path) = reroute_path(labels, classes, i, target, labels[i], &tight) {
                for (point, class) in path {
                    labels[point] = class;
                }
                labels[i] = target;
                break;
            }
        }
    }
}

/// BFS over classes from `from` to `to`, stepping through points `j > fixed`
/// currently in the source class with a tight edge into the next class.
/// Returns the `(point, new class)` moves along the path.
fn reroute_path(
    labels: &[usize],
    classes: usize,
    fixed: usize,
    from: usize,
    to: usize,
    tight: &impl Fn(usize, usize) -> bool,
) -> Option<Vec<(usize, usize)>> {
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; classes];
    let mut seen = vec![false; classes];
    seen[from] = true;
    let mut queue = VecDeque::from([from]);
    while let Some(class) = queue.pop_front() {
        for j in (fixed + 1)..labels.len() {
            if labels[j] != class {
                continue;
            }
            for next in 0..classes {
                if seen[next] || !tight(j, next) {
                    continue;
                }
                seen[next] = true;
                parent[next] = Some((j, class));
                if next == to {
                    let mut moves = Vec::new();
                    let mut cur = to;
                    while cur != from {
                        let (point, prev) = parent[cur].expect("path recorded");
                        moves.push((point, cur));
                        cur = prev;
                    }
                    return Some(moves);
                }
                queue.push_back(next);
            }
        }
    }
    None
}

/// Shortest augmenting path Hungarian method on a square matrix. Returns the
/// slot matched to each row and the row and column potentials, which satisfy
/// `u_i + v_j <= a_ij` with equality on the matching.
fn hungarian(a: &ExpandedCostMatrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = a.size();
    // 1-based with index 0 as the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        row_of[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut slot_of_row = vec![0; n];
    for j in 1..=n {
        slot_of_row[row_of[j] - 1] = j - 1;
    }
    (slot_of_row, u[1..].to_vec(), v[1..].to_vec())
}

/// Number of distinct assignments with the given class sizes.
pub fn multinomial(capacities: &[usize]) -> f64 {
    let mut total = 0usize;
    let mut log = 0.0f64;
    for &c in capacities {
        for k in 1..=c {
            total += 1;
            log += (total as f64).ln() - (k as f64).ln();
        }
    }
    log.exp()
}

/// Exhaustive minimum over every balanced assignment, enumerated in
/// lexicographic order; the first assignment within rounding of the minimum wins.
pub fn brute_force_exact(
    log_p: &LogPredictionMatrix,
    marginals: &Marginals,
) -> Result<(HardAssignment, f64)> {
    let caps = capacities_for(log_p, marginals)?;
    let count = multinomial(&caps);
    if count > MAX_ENUMERATED * (1.0 + 1e-9) {
        return Err(Error::TooLarge(format!(
            "{count:.0} assignments exceed the enumeration limit"
        )));
    }
    let n = log_p.points();
    let k = log_p.classes();
    let w = 1.0 / n as f64;
    let log_n = (n as f64).ln();
    let scale = log_p.as_columns().iter().fold(1.0f64, |m, l| m.max(l.abs()));
    let tie = 1e-10 * scale;

    struct Search<'a> {
        log_p: &'a LogPredictionMatrix,
        remaining: Vec<usize>,
        current: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
        w: f64,
        log_n: f64,
        tie: f64,
    }
    impl Search<'_> {
        fn descend(&mut self, i: usize, partial: f64) {
            if i == self.current.len() {
                let better = self
                    .best
                    .as_ref()
                    .map_or(true, |(b, _)| partial < *b - self.tie);
                if better {
                    self.best = Some((partial, self.current.clone()));
                }
                return;
            }
            for y in 0..self.remaining.len() {
                if self.remaining[y] == 0 {
                    continue;
                }
                self.remaining[y] -= 1;
                self.current[i] = y;
                let next = partial + self.w * (self.log_n - self.log_p.get(y, i));
                self.descend(i + 1, next);
                self.remaining[y] += 1;
            }
        }
    }

    let mut search = Search {
        log_p,
        remaining: caps,
        current: vec![0; n],
        best: None,
        w,
        log_n,
        tie,
    };
    search.descend(0, 0.0);
    let (_, labels) = search.best.expect("capacities sum to N, so one assignment exists");
    let cost = assignment_cost(log_p, &labels);
    Ok((HardAssignment::new(labels, k)?, cost))
}
