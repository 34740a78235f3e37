//! Maximum-weight bipartite assignment via the Hungarian algorithm with
//! potentials (Jonker-Volgenant style shortest augmenting paths).

use ndarray::Array2;

/// Assigns each row of `weights` (n x m, n <= m) a distinct column so the
/// total weight is maximal. Returns `out[i] = column of row i`.
///
/// Runs in O(n^2 m); the matrices here are tiny (annotations x samples).
pub fn max_weight_assignment(weights: &Array2<f64>) -> Vec<usize> {
    let (n, m) = weights.dim();
    assert!(n <= m, "assignment needs at least as many columns as rows");
    assert!(n >= 1, "assignment needs at least one row");
    assert!(
        weights.iter().all(|w| w.is_finite()),
        "assignment weights must be finite"
    );

    // Minimize the negated weights. 1-indexed arrays, column 0 is virtual.
    let cost = |i: usize, j: usize| -weights[[i - 1, j - 1]];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1]; // p[j] = row matched to column j
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
                    let cur = cost(i0, j) - u[i0] - v[j];
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

    let mut out = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    debug_assert!(out.iter().all(|&c| c != usize::MAX));
    out
}

/// Brute force over all injective row -> column maps. Test oracle only.
#[cfg(test)]
pub(crate) fn exhaustive_best(weights: &Array2<f64>) -> f64 {
    let (n, m) = weights.dim();
    fn rec(w: &Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == w.nrows() {
            if acc > *best {
                *best = acc;
            }
            return;
        }
        for col in 0..w.ncols() {
            if !used[col] {
                used[col] = true;
                rec(w, row + 1, used, acc + w[[row, col]], best);
                used[col] = false;
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    rec(weights, 0, &mut vec![false; m], 0.0, &mut best);
    assert!(n <= m);
    best
}
