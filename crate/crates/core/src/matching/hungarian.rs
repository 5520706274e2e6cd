//! Minimum-cost assignment.
//!
//! The shortest-augmenting-path Hungarian method runs on the orientation with
//! fewer rows. Its dual solution is then extended to the zero-padded square
//! problem, where every optimal assignment lives on the tight edges. A final
//! pass walks rows in order and moves each to the smallest tight column that
//! still admits a perfect tight matching of the unlocked rows, which yields
//! the lexicographically smallest optimal assignment.

use std::collections::VecDeque;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the assigned costs, accumulated in row order.
    pub cost: f64,
}

impl Assignment {
    /// Column of each row, `None` when the row is unassigned.
    pub fn col_of_row(&self, n_rows: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_rows];
        for &(r, c) in &self.pairs {
            out[r] = Some(c);
        }
        out
    }
}

/// Optimal one-to-one assignment of `min(n, m)` pairs. Ties resolve to the
/// lexicographically smallest column sequence over rows, where an unassigned
/// row ranks after every column.
pub fn hungarian(cost: ArrayView2<'_, f64>) -> Result<Assignment> {
    if cost.iter().any(|c| c.is_nan()) {
        return Err(Error::NaN("assignment cost"));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Param("assignment costs must be finite".into()));
    }
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            cost: 0.0,
        });
    }
    let scale = cost.iter().fold(0.0_f64, |a, c| a.max(c.abs()));
    let tol = 1e-10 * (1.0 + scale) * n.max(m) as f64;

    // Square problem: priority vertices are the rows, partners are the
    // columns; the short side is padded with zero-cost dummies.
    let k = n.max(m);
    let (mut partner, u_row, v_col) = if n <= m {
        let (row_to_col, u, v) = shortest_augmenting(n, m, |i, j| cost[[i, j]]);
        let mut partner = vec![usize::MAX; k];
        let mut taken = vec![false; m];
        for (i, &j) in row_to_col.iter().enumerate() {
            partner[i] = j;
            taken[j] = true;
        }
        let mut free = (0..m).filter(|&j| !taken[j]);
        for p in partner.iter_mut().skip(n) {
            *p = free.next().expect("as many free columns as dummy rows");
        }
        let mut u_row = u;
        u_row.resize(k, 0.0);
        (partner, u_row, v)
    } else {
        // transposed: algorithm rows are our columns
        let (col_to_row, u_cols, v_rows) = shortest_augmenting(m, n, |j, i| cost[[i, j]]);
        let mut partner = vec![usize::MAX; k];
        for (j, &i) in col_to_row.iter().enumerate() {
            partner[i] = j;
        }
        let mut dummy = m..k;
        for p in partner.iter_mut() {
            if *p == usize::MAX {
                *p = dummy.next().expect("as many dummy columns as free rows");
            }
        }
        let mut v_col = u_cols;
        v_col.resize(k, 0.0);
        (partner, v_rows, v_col)
    };

    let padded = |i: usize, j: usize| if i < n && j < m { cost[[i, j]] } else { 0.0 };
    let tight = |i: usize, j: usize| (padded(i, j) - u_row[i] - v_col[j]).abs() <= tol;
    lexicographic_refine(&mut partner, n, m, &tight);

    let mut pairs = Vec::new();
    let mut total = 0.0;
    for (i, &j) in partner.iter().enumerate().take(n) {
        if j < m {
            pairs.push((i, j));
            total += cost[[i, j]];
        }
    }
    Ok(Assignment { pairs, cost: total })
}

/// Shortest augmenting path method for `rows <= cols`. Returns the column of
/// each row and the dual potentials `(u, v)` with `u_i + v_j <= c_ij`,
/// `v_j <= 0`, and `v_j = 0` on unassigned columns.
fn shortest_augmenting(rows: usize, cols: usize, c: impl Fn(usize, usize) -> f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    debug_assert!(rows <= cols);
    // 1-based with slot 0 as the virtual source
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// `partner` is a perfect matching of the square tight graph. Rows `>= n` and
/// columns `>= m` are dummies; dummy columns are interchangeable.
fn lexicographic_refine(partner: &mut [usize], n: usize, m: usize, tight: &dyn Fn(usize, usize) -> bool) {
    let k = partner.len();
    let mut owner = vec![0usize; k];
    for (i, &j) in partner.iter().enumerate() {
        owner[j] = i;
    }
    let mut locked_col = vec![false; k];
    for r in 0..n {
        let current = partner[r];
        let limit = current.min(m);
        for cand in 0..limit {
            if locked_col[cand] || !tight(r, cand) {
                continue;
            }
            // r takes `cand`; its owner must reach `current` along tight edges
            // through rows that are not yet fixed.
            let start = owner[cand];
            if let Some(path) = alternating_path(start, current, cand, r, partner, &owner, &locked_col, tight) {
                for (row, col) in path {
                    partner[row] = col;
                    owner[col] = row;
                }
                partner[r] = cand;
                owner[cand] = r;
                break;
            }
        }
        locked_col[partner[r]] = true;
    }
}

/// Breadth-first search from `start` for `target`, avoiding locked columns,
/// `banned` (just taken by `skip_row`). Returns the row reassignments.
#[allow(clippy::too_many_arguments)]
fn alternating_path(
    start: usize,
    target: usize,
    banned: usize,
    skip_row: usize,
    partner: &[usize],
    owner: &[usize],
    locked_col: &[bool],
    tight: &dyn Fn(usize, usize) -> bool,
) -> Option<Vec<(usize, usize)>> {
    let k = partner.len();
    let mut parent_row = vec![usize::MAX; k];
    let mut seen = vec![false; k];
    seen[banned] = true;
    let mut queue = VecDeque::from([start]);
    while let Some(x) = queue.pop_front() {
        for y in 0..k {
            if seen[y] || locked_col[y] || !tight(x, y) {
                continue;
            }
            seen[y] = true;
            parent_row[y] = x;
            if y == target {
                let mut moves = Vec::new();
                let mut col = y;
                loop {
                    let row = parent_row[col];
                    moves.push((row, col));
                    if row == start {
                        return Some(moves);
                    }
                    col = partner[row];
                }
            }
            let next = owner[y];
            if next != skip_row {
                queue.push_back(next);
            }
        }
    }
    None
}
