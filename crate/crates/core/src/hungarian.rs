//! Maximum-weight partial assignment on a rectangular score matrix.
//!
//! The `n × m` problem with optional skipping is reduced to a square
//! `(n+m) × (n+m)` min-cost assignment: each row may pair with its own
//! "unmatched" column and each column with its own "unmatched" row at zero
//! cost, and forbidden cells carry a prohibitive cost. The square problem is
//! solved with the O(N³) shortest-augmenting-path Hungarian method.

/// Solves min-cost perfect assignment on a square row-major matrix.
/// Returns `col_of_row`.
pub fn min_cost_assignment(cost: &[f64], size: usize) -> Vec<usize> {
    debug_assert_eq!(cost.len(), size * size);
    if size == 0 {
        return Vec::new();
    }
    // 1-based potentials and matching, column 0 is the virtual source
    let mut u = vec![0.0; size + 1];
    let mut v = vec![0.0; size + 1];
    let mut row_of_col = vec![0usize; size + 1];
    let mut way = vec![0usize; size + 1];
    for row in 1..=size {
        row_of_col[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[col0] = true;
            let r0 = row_of_col[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=size {
                if used[col] {
                    continue;
                }
                let cur = cost[(r0 - 1) * size + (col - 1)] - u[r0] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=size {
                if used[col] {
                    u[row_of_col[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            row_of_col[col0] = row_of_col[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; size];
    for col in 1..=size {
        if row_of_col[col] > 0 {
            col_of_row[row_of_col[col] - 1] = col - 1;
        }
    }
    col_of_row
}

/// Pairs `(i, j)` maximising Σ scores over `allowed` cells, each row and
/// column used at most once. Unmatched rows and columns are permitted.
pub fn max_weight_partial_assignment(
    scores: &[f64],
    rows: usize,
    cols: usize,
    allowed: &[bool],
) -> Vec<(usize, usize)> {
    assert_eq!(scores.len(), rows * cols);
    assert_eq!(allowed.len(), rows * cols);
    if !allowed.iter().any(|a| *a) {
        return Vec::new();
    }
    let size = rows + cols;
    let span = scores
        .iter()
        .zip(allowed)
        .filter(|(_, a)| **a)
        .fold(0.0_f64, |m, (s, _)| m.max(s.abs()));
    // strictly worse than any feasible total
    let forbidden = 4.0 * (size as f64) * (span + 1.0);
    let mut cost = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..size {
            cost[i * size + j] = match (i < rows, j < cols) {
                (true, true) => {
                    if allowed[i * cols + j] {
                        -scores[i * cols + j]
                    } else {
                        forbidden
                    }
                }
                (true, false) => {
                    if j - cols == i {
                        0.0
                    } else {
                        forbidden
                    }
                }
                (false, true) => {
                    if i - rows == j {
                        0.0
                    } else {
                        forbidden
                    }
                }
                (false, false) => 0.0,
            };
        }
    }
    let col_of_row = min_cost_assignment(&cost, size);
    (0..rows)
        .filter_map(|i| {
            let j = col_of_row[i];
            (j < cols && allowed[i * cols + j]).then_some((i, j))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_min_cost() {
        let cost = [8.0, 4.0, 7.0, 5.0, 2.0, 3.0, 9.0, 4.0, 8.0];
        let a = min_cost_assignment(&cost, 3);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * 3 + j]).sum();
        assert_eq!(total, 15.0);
    }

    #[test]
    fn negative_scores_are_skipped() {
        let pairs = max_weight_partial_assignment(&[-1.0, 2.0], 1, 2, &[true, true]);
        assert_eq!(pairs, vec![(0, 1)]);
        let pairs = max_weight_partial_assignment(&[-1.0, -2.0], 1, 2, &[true, true]);
        assert!(pairs.is_empty());
    }

    #[test]
    fn forbidden_cells_never_used() {
        let pairs = max_weight_partial_assignment(&[10.0, 1.0, 1.0, 10.0], 2, 2, &[false, true, true, false]);
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn rectangular_and_empty() {
        assert!(max_weight_partial_assignment(&[], 0, 3, &[]).is_empty());
        let pairs = max_weight_partial_assignment(&[0.9, 0.1, 0.8], 3, 1, &[true, true, true]);
        assert_eq!(pairs, vec![(0, 0)]);
    }
}
