//! Linear sum assignment.
//!
//! The core solver is the O(n^2 k) shortest-augmenting-path form of the
//! Hungarian method with row/column potentials. Among assignments of equal
//! total cost the lexicographically smallest column sequence is returned.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `columns[i]` is the column assigned to row `i`.
    pub columns: Vec<usize>,
    pub total: f64,
}

/// Minimum-cost assignment of every row of a row-major `rows x cols`
/// matrix to a distinct column (`rows <= cols`).
pub fn hungarian_assign(cost: &[f64], rows: usize, cols: usize) -> Result<Assignment> {
    if cost.len() != rows * cols {
        return Err(Error::shape("hungarian_assign", &[rows, cols], &[cost.len()]));
    }
    if rows > cols {
        return Err(Error::contract(format!(
            "assignment needs rows <= columns, got {rows} x {cols}"
        )));
    }
    if let Some(c) = cost.iter().find(|c| !c.is_finite()) {
        return Err(Error::contract(format!("non-finite cost {c}")));
    }
    if rows == 0 {
        return Ok(Assignment {
            columns: Vec::new(),
            total: 0.0,
        });
    }

    let all_rows: Vec<usize> = (0..rows).collect();
    let all_cols: Vec<usize> = (0..cols).collect();
    let best = solve(cost, cols, &all_rows, &all_cols);
    let scale = cost.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale * rows as f64;

    // Fix rows one at a time to the lowest column that still admits an
    // optimal completion.
    let mut columns = Vec::with_capacity(rows);
    let mut free: Vec<usize> = (0..cols).collect();
    let mut prefix = 0.0;
    for i in 0..rows {
        let rest: Vec<usize> = (i + 1..rows).collect();
        let mut chosen = None;
        for (slot, &j) in free.iter().enumerate() {
            let c = cost[i * cols + j];
            let remaining: Vec<usize> = free.iter().copied().filter(|&x| x != j).collect();
            let completion = if rest.is_empty() {
                0.0
            } else {
                solve(cost, cols, &rest, &remaining)
            };
            if prefix + c + completion <= best + tol {
                chosen = Some((slot, j, c));
                break;
            }
        }
        let (slot, j, c) = chosen.expect("an optimal completion always exists");
        free.remove(slot);
        columns.push(j);
        prefix += c;
    }
    let total = columns.iter().enumerate().map(|(i, &j)| cost[i * cols + j]).sum();
    Ok(Assignment { columns, total })
}

/// Optimal cost of assigning `row_ids` to distinct members of `col_ids`.
/// `stride` is the row stride of `cost`.
fn solve(cost: &[f64], stride: usize, row_ids: &[usize], col_ids: &[usize]) -> f64 {
    let n = row_ids.len();
    let m = col_ids.len();
    debug_assert!(n <= m);
    let c = |i: usize, j: usize| cost[row_ids[i - 1] * stride + col_ids[j - 1]];

    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c(i0, j) - u[i0] - v[j];
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
    (1..=m).filter(|&j| owner[j] != 0).map(|j| c(owner[j], j)).sum()
}
