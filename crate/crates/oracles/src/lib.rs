//! Slow, independent reference implementations used only by tests.
//!
//! Nothing here shares code with `croc-core`: matrices are plain
//! `Vec<Vec<f64>>` and every routine is the most direct formulation of its
//! definition (enumeration, explicit loops).

pub type Matrix = Vec<Vec<f64>>;

/// Neumaier-compensated sum.
pub fn accurate_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Exact optimum of `min <Q, T>` over the transportation polytope `U(r, c)`
/// by enumerating every basis: sets of `m + n - 1` cells forming a spanning
/// tree of the bipartite row/column graph. Each tree determines a unique
/// flow (solved by peeling leaves); the cheapest nonnegative one is a vertex
/// optimum. Intended for `m, n <= 4`.
pub fn transport_lp(cost: &Matrix, r: &[f64], c: &[f64]) -> (f64, Matrix) {
    let m = r.len();
    let n = c.len();
    assert!(m >= 1 && n >= 1 && cost.len() == m && cost.iter().all(|row| row.len() == n));
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let size = m + n - 1;
    let mut best: Option<(f64, Matrix)> = None;
    let mut pick: Vec<usize> = (0..size).collect();
    loop {
        let basis: Vec<(usize, usize)> = pick.iter().map(|&p| cells[p]).collect();
        if let Some(flow) = tree_flow(&basis, r, c) {
            if flow.iter().flatten().all(|&v| v >= -1e-12) {
                let value = accurate_sum(
                    (0..m)
                        .flat_map(|i| (0..n).map(move |j| (i, j)))
                        .map(|(i, j)| flow[i][j] * cost[i][j]),
                );
                if best.as_ref().is_none_or(|(b, _)| value < *b) {
                    best = Some((value, flow));
                }
            }
        }
        if !next_combination(&mut pick, cells.len()) {
            break;
        }
    }
    best.expect("the polytope is non-empty")
}

fn next_combination(pick: &mut [usize], n: usize) -> bool {
    let k = pick.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if pick[i] < n - k + i {
            pick[i] += 1;
            for j in i + 1..k {
                pick[j] = pick[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Flow on a spanning tree with the given supplies, or `None` if the cells
/// do not form a spanning tree.
fn tree_flow(basis: &[(usize, usize)], r: &[f64], c: &[f64]) -> Option<Matrix> {
    let m = r.len();
    let n = c.len();
    // nodes 0..m are rows, m..m+n columns
    let mut parent: Vec<usize> = (0..m + n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut x = x;
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(i, j) in basis {
        let a = find(&mut parent, i);
        let b = find(&mut parent, m + j);
        if a == b {
            return None;
        }
        parent[a] = b;
    }
    let mut flow = vec![vec![0.0; n]; m];
    let mut remaining: Vec<f64> = r.iter().chain(c.iter()).copied().collect();
    let mut edges: Vec<(usize, usize)> = basis.to_vec();
    while !edges.is_empty() {
        let mut degree = vec![0usize; m + n];
        for &(i, j) in &edges {
            degree[i] += 1;
            degree[m + j] += 1;
        }
        let (pos, leaf) = edges
            .iter()
            .enumerate()
            .find_map(|(p, &(i, j))| {
                if degree[i] == 1 {
                    Some((p, i))
                } else if degree[m + j] == 1 {
                    Some((p, m + j))
                } else {
                    None
                }
            })
            .expect("a tree always has a leaf");
        let (i, j) = edges.swap_remove(pos);
        let amount = remaining[leaf];
        flow[i][j] = amount;
        remaining[i] -= amount;
        remaining[m + j] -= amount;
    }
    Some(flow)
}

/// Largest violation of the rank-one structure of `log q + lambda T`, i.e.
/// `max |L_ij - L_i0 - L_0j + L_00|`. Zero exactly when
/// `q = diag(u) exp(-lambda T) diag(v)` for positive `u`, `v`.
pub fn scaling_residual(q: &Matrix, cost: &Matrix, lambda: f64) -> f64 {
    let l: Matrix = q
        .iter()
        .zip(cost)
        .map(|(qr, tr)| qr.iter().zip(tr).map(|(x, t)| x.ln() + lambda * t).collect())
        .collect();
    let mut worst = 0.0f64;
    for i in 0..l.len() {
        for j in 0..l[0].len() {
            let v = (l[i][j] - l[i][0] - l[0][j] + l[0][0]).abs();
            worst = worst.max(if v.is_nan() { f64::INFINITY } else { v });
        }
    }
    worst
}

/// Largest absolute deviation of row sums from `r` and column sums from `c`.
pub fn marginal_error(q: &Matrix, r: &[f64], c: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for (row, ri) in q.iter().zip(r) {
        worst = worst.max((accurate_sum(row.iter().copied()) - ri).abs());
    }
    for (j, cj) in c.iter().enumerate() {
        worst = worst.max((accurate_sum(q.iter().map(|row| row[j])) - cj).abs());
    }
    worst
}

/// Every permutation of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = vec![a.clone()];
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Minimum assignment cost over all permutations, summed in row order.
pub fn brute_force_assignment(cost: &Matrix) -> f64 {
    permutations(cost.len())
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Columns that no row of `q1` or no row of `q2` selects by argmax (first
/// maximum wins), found by scanning each column against every row.
pub fn pruned_columns(q1: &Matrix, q2: &Matrix) -> Vec<usize> {
    let k = q1[0].len();
    let argmax = |row: &Vec<f64>| {
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        best
    };
    (0..k)
        .filter(|&j| !q1.iter().any(|row| argmax(row) == j) || !q2.iter().any(|row| argmax(row) == j))
        .collect()
}

/// Pair `(i, j)`, `i < j`, of maximal cosine similarity, ties to the first
/// pair in lexicographic order.
pub fn most_similar_pair(rows: &Matrix) -> Option<(usize, usize)> {
    let cos = |a: &Vec<f64>, b: &Vec<f64>| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    let mut pairs = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            pairs.push(((i, j), cos(&rows[i], &rows[j])));
        }
    }
    let best = pairs.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    pairs.into_iter().find(|p| p.1 == best).map(|p| p.0)
}

/// `-(1/K) sum a log max(b, clamp)` with compensated summation.
pub fn cross_entropy(a: &Matrix, b: &Matrix, clamp: f64) -> f64 {
    let terms = a.iter().zip(b).flat_map(|(ra, rb)| {
        ra.iter()
            .zip(rb)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| -x * y.max(clamp).ln())
            .collect::<Vec<_>>()
    });
    accurate_sum(terms) / a.len() as f64
}

/// `C[k][e] = sum_n q[n][k] z[n][e]`.
pub fn pool(z: &Matrix, q: &Matrix) -> Matrix {
    let k = q[0].len();
    let d = z[0].len();
    (0..k)
        .map(|kk| {
            (0..d)
                .map(|e| accurate_sum((0..z.len()).map(|n| q[n][kk] * z[n][e])))
                .collect()
        })
        .collect()
}

/// Per-class IoU by counting positions; `None` if the class is absent from both.
pub fn iou_by_counting(pred: &[u16], gt: &[u16], n_classes: usize) -> Vec<Option<f64>> {
    (0..n_classes as u16)
        .map(|c| {
            let inter = pred.iter().zip(gt).filter(|(p, g)| **p == c && **g == c).count();
            let union = pred.iter().zip(gt).filter(|(p, g)| **p == c || **g == c).count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect()
}

/// Best label accuracy over all relabelings of `pred` (values `< k`).
pub fn permutation_accuracy(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    let classes = truth.iter().copied().max().map_or(0, |m| m + 1).max(k);
    permutations(classes)
        .iter()
        .map(|p| pred.iter().zip(truth).filter(|(a, b)| p[**a] == **b).count())
        .max()
        .unwrap_or(0) as f64
        / pred.len() as f64
}
