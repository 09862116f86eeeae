//! Minimum-cost bipartite assignment (Hungarian algorithm, potentials +
//! shortest augmenting path, O(n^2 m)).

/// Result of a rectangular assignment. `row_to_col[r]` is the column
/// matched to row `r`. When there are more rows than columns the surplus
/// rows stay unmatched (`None`); with rows <= cols every row is matched.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub row_to_col: Vec<Option<usize>>,
    pub total_cost: f64,
}

/// Solve min-cost assignment on a dense `rows x cols` matrix (row-major).
/// All costs must be finite.
pub fn min_cost_assignment(cost: &[f64], rows: usize, cols: usize) -> Assignment {
    assert_eq!(cost.len(), rows * cols, "cost matrix size mismatch");
    assert!(cost.iter().all(|c| c.is_finite()), "costs must be finite");
    if rows == 0 || cols == 0 {
        return Assignment {
            row_to_col: vec![None; rows],
            total_cost: 0.0,
        };
    }
    if rows > cols {
        // solve the transpose, then invert the matching
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = cost[r * cols + c];
            }
        }
        let sub = min_cost_assignment(&t, cols, rows);
        let mut row_to_col = vec![None; rows];
        for (c, r) in sub.row_to_col.iter().enumerate() {
            if let Some(r) = r {
                row_to_col[*r] = Some(c);
            }
        }
        return Assignment {
            row_to_col,
            total_cost: sub.total_cost,
        };
    }

    // 1-indexed arrays; p[j] = row matched to column j, 0 = none
    let n = rows;
    let m = cols;
    let a = |i: usize, j: usize| cost[(i - 1) * cols + (j - 1)];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
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
    let mut row_to_col = vec![None; rows];
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = Some(j - 1);
            total += a(p[j], j);
        }
    }
    Assignment {
        row_to_col,
        total_cost: total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all row->col injections.
    fn brute_force(cost: &[f64], rows: usize, cols: usize) -> f64 {
        fn rec(cost: &[f64], cols: usize, r: usize, rows: usize, used: &mut Vec<bool>) -> f64 {
            if r == rows {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..cols {
                if !used[c] {
                    used[c] = true;
                    let v = cost[r * cols + c] + rec(cost, cols, r + 1, rows, used);
                    used[c] = false;
                    best = best.min(v);
                }
            }
            best
        }
        assert!(rows <= cols);
        rec(cost, cols, 0, rows, &mut vec![false; cols])
    }

    #[test]
    fn two_by_two() {
        let cost = vec![1.0, 2.0, 2.0, 1.0];
        let a = min_cost_assignment(&cost, 2, 2);
        assert_eq!(a.row_to_col, vec![Some(0), Some(1)]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn empty_rows() {
        let a = min_cost_assignment(&[], 0, 4);
        assert!(a.row_to_col.is_empty());
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn rectangular_leaves_rows_unmatched() {
        // 3 rows, 2 cols: one row unmatched
        let cost = vec![1.0, 10.0, 10.0, 1.0, 5.0, 5.0];
        let a = min_cost_assignment(&cost, 3, 2);
        let matched = a.row_to_col.iter().flatten().count();
        assert_eq!(matched, 2);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn matches_brute_force_up_to_six() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..100 {
            let rows = rng.gen_range(1..=6usize);
            let cols = rng.gen_range(rows..=6usize);
            let cost: Vec<f64> = (0..rows * cols)
                .map(|_| (rng.gen_range(0..1000) as f64) / 10.0)
                .collect();
            let a = min_cost_assignment(&cost, rows, cols);
            let mut total = 0.0;
            let mut seen = vec![false; cols];
            for (r, c) in a.row_to_col.iter().enumerate() {
                let c = c.expect("rows <= cols must fully match");
                assert!(!seen[c], "duplicate column in trial {trial}");
                seen[c] = true;
                total += cost[r * cols + c];
            }
            let expect = brute_force(&cost, rows, cols);
            assert!(
                (total - expect).abs() < 1e-9,
                "trial {trial}: {total} vs brute {expect}"
            );
        }
    }
}
