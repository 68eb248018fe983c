//! Bipartite assignment between predictions and ground-truth instances.
//!
//! `hungarian` gives a minimum-cost matching (shortest augmenting paths with
//! potentials, O(n^3)); `greedy_assign` repeatedly takes the globally
//! cheapest remaining cell, which is deliberately not optimal (used for
//! matching newly appearing instances to leftover static predictions).
//! Both are pure f64 computations with no autodiff involvement.

use crate::{Error, Result};

/// Dense cost matrix, rows = predictions (P), columns = ground truth (G).
#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> CostMatrix {
        assert_eq!(data.len(), rows * cols, "cost matrix: {rows}x{cols} needs {} entries", rows * cols);
        CostMatrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> CostMatrix {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        assert!(rows.iter().all(|r| r.len() == cols), "cost matrix: ragged rows");
        CostMatrix::new(rows.len(), cols, rows.iter().flatten().copied().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "cost matrix: non-finite entry {} at ({}, {})",
                self.data[i],
                i / self.cols,
                i % self.cols
            )));
        }
        Ok(())
    }
}

/// Result of an assignment; pairs are (prediction index, ground-truth index)
/// sorted by prediction index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_ground_truth: Vec<usize>,
}

impl Assignment {
    fn from_pairs(mut pairs: Vec<(usize, usize)>, rows: usize, cols: usize) -> Assignment {
        pairs.sort_unstable();
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        for &(r, c) in &pairs {
            row_used[r] = true;
            col_used[c] = true;
        }
        Assignment {
            pairs,
            unmatched_predictions: (0..rows).filter(|&r| !row_used[r]).collect(),
            unmatched_ground_truth: (0..cols).filter(|&c| !col_used[c]).collect(),
        }
    }

    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost.at(r, c)).sum()
    }

    /// Ground-truth index matched to a prediction row, if any.
    pub fn gt_for_prediction(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(r, _)| r == row).map(|&(_, c)| c)
    }
}

/// Minimum-cost matching of size min(P, G). Deterministic: equal-cost optima
/// resolve by ascending column scans with strict improvement.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    cost.check_finite()?;
    let (p, g) = (cost.rows, cost.cols);
    if p == 0 || g == 0 {
        return Ok(Assignment::from_pairs(vec![], p, g));
    }
    let transposed = p > g;
    let (n, m) = if transposed { (g, p) } else { (p, g) };
    let at = |i: usize, j: usize| if transposed { cost.at(j, i) } else { cost.at(i, j) };

    // Shortest augmenting path with potentials; 1-based columns, col 0 is
    // the virtual start. p_col[j] = row matched to column j (0 = none).
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p_col = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p_col[j0] = p_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::with_capacity(n);
    for j in 1..=m {
        if p_col[j] != 0 {
            let (row, col) = (p_col[j] - 1, j - 1);
            pairs.push(if transposed { (col, row) } else { (row, col) });
        }
    }
    Ok(Assignment::from_pairs(pairs, p, g))
}

/// Greedy assignment: repeatedly take the globally cheapest remaining cell,
/// ties broken by lowest (row, column). Not optimal by construction.
pub fn greedy_assign(cost: &CostMatrix) -> Result<Assignment> {
    cost.check_finite()?;
    let (p, g) = (cost.rows, cost.cols);
    let mut row_free = vec![true; p];
    let mut col_free = vec![true; g];
    let mut pairs = Vec::with_capacity(p.min(g));
    for _ in 0..p.min(g) {
        let mut best: Option<(f64, usize, usize)> = None;
        for r in 0..p {
            if !row_free[r] {
                continue;
            }
            for c in 0..g {
                if !col_free[c] {
                    continue;
                }
                let v = cost.at(r, c);
                if best.map(|(b, _, _)| v < b).unwrap_or(true) {
                    best = Some((v, r, c));
                }
            }
        }
        let (_, r, c) = best.expect("greedy: no free cell despite remaining capacity");
        row_free[r] = false;
        col_free[c] = false;
        pairs.push((r, c));
    }
    Ok(Assignment::from_pairs(pairs, p, g))
}

/// Minimum assignment cost by exhaustive search over all injections of the
/// smaller side into the larger. Test oracle; feasible for min(P, G) <= ~8.
pub fn brute_force_min_cost(cost: &CostMatrix) -> f64 {
    let (p, g) = (cost.rows, cost.cols);
    if p == 0 || g == 0 {
        return 0.0;
    }
    // Recurse over the smaller side for tractability; totals are summed in
    // ascending prediction index order so they are bit-comparable with
    // Assignment::total_cost regardless of orientation.
    let transposed = p > g;
    let (n, m) = if transposed { (g, p) } else { (p, g) };
    fn rec(
        i: usize,
        n: usize,
        m: usize,
        used: &mut [bool],
        choice: &mut Vec<usize>,
        total: &dyn Fn(&[usize]) -> f64,
        best: &mut f64,
    ) {
        if i == n {
            let t = total(choice);
            if t < *best {
                *best = t;
            }
            return;
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                choice.push(j);
                rec(i + 1, n, m, used, choice, total, best);
                choice.pop();
                used[j] = false;
            }
        }
    }
    let total = |choice: &[usize]| -> f64 {
        let mut pairs: Vec<(usize, usize)> = choice
            .iter()
            .enumerate()
            .map(|(i, &j)| if transposed { (j, i) } else { (i, j) })
            .collect();
        pairs.sort_unstable();
        pairs.iter().map(|&(r, c)| cost.at(r, c)).sum()
    };
    let mut best = f64::INFINITY;
    rec(0, n, m, &mut vec![false; m], &mut Vec::new(), &total, &mut best);
    best
}
