//! Linear assignment and the set-matching cost.

use crate::Error;

/// Optimal assignment: `perm[i]` is the column given to row `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub cost: f64,
}

fn check_finite(cost: &[Vec<f64>]) -> Result<(usize, usize), Error> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Domain("cost matrix rows differ in length".into()));
    }
    if let Some((i, j)) = cost
        .iter()
        .enumerate()
        .find_map(|(i, r)| r.iter().position(|x| !x.is_finite()).map(|j| (i, j)))
    {
        return Err(Error::Domain(format!(
            "cost[{i}][{j}] = {} is not finite",
            cost[i][j]
        )));
    }
    Ok((n, m))
}

/// Shortest-augmenting-path solver for `n ≤ m`. Returns the row assignment
/// and the dual potentials `(u, v)` with `c[i][j] - u[i] - v[j] ≥ 0`.
fn solve(cost: &[Vec<f64>], n: usize, m: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based internals; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut rows = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            rows[p[j] - 1] = j - 1;
        }
    }
    (rows, u[1..].to_vec(), v[1..].to_vec())
}

fn row_order_cost(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Kuhn augmenting path on the tight-edge graph.
fn augment(
    adj: &[Vec<usize>],
    row: usize,
    seen: &mut [bool],
    col_owner: &mut [Option<usize>],
) -> bool {
    for &j in &adj[row] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        if col_owner[j].is_none_or(|r| augment(adj, r, seen, col_owner)) {
            col_owner[j] = Some(row);
            return true;
        }
    }
    false
}

fn completes(adj: &[Vec<usize>], from: usize, taken: &[bool]) -> bool {
    let m = taken.len();
    let mut owner: Vec<Option<usize>> = vec![None; m];
    let masked: Vec<Vec<usize>> = adj
        .iter()
        .map(|r| r.iter().copied().filter(|&j| !taken[j]).collect())
        .collect();
    (from..adj.len()).all(|r| {
        let mut seen = vec![false; m];
        augment(&masked, r, &mut seen, &mut owner)
    })
}

/// Optimal square assignment. Among optimal permutations the
/// lexicographically smallest is returned; optimality of an edge is judged
/// on the solver's reduced costs with a relative tolerance of `1e-9`.
/// The tie-break runs one bipartite-matching check per candidate edge, so
/// it is meant for small matrices.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment, Error> {
    let (n, m) = check_finite(cost)?;
    if n != m {
        return Err(Error::Domain(format!(
            "hungarian needs a square matrix, got {n}x{m}"
        )));
    }
    if n == 0 {
        return Ok(Assignment {
            perm: vec![],
            cost: 0.0,
        });
    }
    let (_, u, v) = solve(cost, n, n);
    let scale = cost.iter().flatten().fold(1.0f64, |a, x| a.max(x.abs()));
    let tol = 1e-9 * scale;
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| cost[i][j] - u[i] - v[j] <= tol)
                .collect()
        })
        .collect();
    let mut taken = vec![false; n];
    let mut perm = Vec::with_capacity(n);
    for i in 0..n {
        let pick = adj[i]
            .iter()
            .copied()
            .find(|&j| {
                if taken[j] {
                    return false;
                }
                taken[j] = true;
                let ok = completes(&adj, i + 1, &taken);
                taken[j] = false;
                ok
            })
            .expect("tight graph of an optimal dual has a perfect matching");
        taken[pick] = true;
        perm.push(pick);
    }
    let total = row_order_cost(cost, &perm);
    Ok(Assignment { perm, cost: total })
}

/// Minimum-cost matching of a rectangular matrix. Returns `(row, col)` pairs
/// covering `min(rows, cols)` rows/columns, sorted by row.
pub fn hungarian_rect(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>, Error> {
    let (n, m) = check_finite(cost)?;
    if n == 0 || m == 0 {
        return Ok(vec![]);
    }
    if n <= m {
        let (rows, _, _) = solve(cost, n, m);
        Ok(rows.into_iter().enumerate().collect())
    } else {
        let t: Vec<Vec<f64>> = (0..m)
            .map(|j| (0..n).map(|i| cost[i][j]).collect())
            .collect();
        let (cols, _, _) = solve(&t, m, n);
        let mut pairs: Vec<(usize, usize)> =
            cols.into_iter().enumerate().map(|(j, i)| (i, j)).collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// Pairwise matching cost `-p(c) + ‖b - b̂‖₁` for a real class; 0 for the
/// no-object class (`class = None`).
pub fn match_cost(target: &[f64], class: Option<usize>, pred: &[f64], probs: &[f64]) -> f64 {
    match class {
        None => 0.0,
        Some(c) => {
            let l1: f64 = target.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum();
            -probs[c] + l1
        }
    }
}
