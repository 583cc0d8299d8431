//! Optimal assignment via the O(n^3) Hungarian algorithm with potentials.
//! Exposed as profit maximization over a rectangular matrix, which is what
//! IoU-based mask matching needs.

use crate::math::Matrix;

/// Maximize total profit over a one-to-one row-to-column assignment.
/// Returns, for each row, the matched column (or `None` when the row is left
/// unassigned because columns ran out or only dummy pairings remained).
pub fn max_profit_assignment(profit: &Matrix) -> Vec<Option<usize>> {
    let rows = profit.rows();
    let cols = profit.cols();
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    // Pad to square with zero-profit dummy cells and minimize the negated
    // profits; dummy matches carry no value and are reported as None.
    let n = rows.max(cols);
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -profit.get(i, j)
        } else {
            0.0
        }
    };

    // Classic potentials formulation, 1-indexed internally:
    // p[j] = row currently assigned to column j (0 = none).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i - 1 < rows && j - 1 < cols {
            assignment[i - 1] = Some(j - 1);
        }
    }
    assignment
}

/// Total profit of an assignment, for comparisons against oracles.
pub fn assignment_profit(profit: &Matrix, assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| profit.get(i, j)))
        .sum()
}
