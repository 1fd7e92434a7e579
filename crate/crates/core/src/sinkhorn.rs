//! Entropy-regularized optimal transport via log-domain Sinkhorn-Knopp scaling.
//!
//! Solves
//!
//! ```text
//! min_{Q in U(r, c)}  <Q, T> - (1/lambda) H(Q)
//! ```
//!
//! whose minimizer has the scaling form `Q = diag(u) exp(-lambda T) diag(v)`.
//! The iteration keeps the logarithms of the scalings (`f = log u`,
//! `g = log v`) and evaluates every row/column reduction with log-sum-exp, so
//! kernels such as `exp(-100 * 2)` never underflow.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

use crate::error::{shape_err, Error, Result};

/// Assignment cost between `2N` tokens (rows) and `K` centroids (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    data: Array2<f64>,
}

impl CostMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (n, k) = data.dim();
        if n == 0 || k == 0 {
            return Err(shape_err(format!("cost matrix must be at least 1x1, got {n}x{k}")));
        }
        if let Some(((i, j), v)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite cost {v} at ({i}, {j})")));
        }
        Ok(Self { data })
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }
}

/// Row (token) and column (centroid) marginals; both on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalPair {
    r: Array1<f64>,
    c: Array1<f64>,
}

const SIMPLEX_TOL: f64 = 1e-9;

fn check_simplex(name: &str, v: ArrayView1<'_, f64>) -> Result<()> {
    if v.is_empty() {
        return Err(shape_err(format!("marginal {name} is empty")));
    }
    if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !x.is_finite() || **x < 0.0) {
        return Err(Error::Input(format!(
            "marginal {name} has invalid entry {x} at index {i}"
        )));
    }
    let sum = v.sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Input(format!("marginal {name} sums to {sum}, not 1")));
    }
    Ok(())
}

impl MarginalPair {
    pub fn new(r: Array1<f64>, c: Array1<f64>) -> Result<Self> {
        check_simplex("r", r.view())?;
        check_simplex("c", c.view())?;
        Ok(Self { r, c })
    }

    pub fn r(&self) -> &Array1<f64> {
        &self.r
    }

    pub fn c(&self) -> &Array1<f64> {
        &self.c
    }
}

/// How the column potentials are updated between row normalizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Update {
    /// Plain alternating normalization of columns.
    Alternating,
    /// Damped Newton step on the column potentials, falling back to the
    /// alternating update when the step makes no progress.
    Newton,
}

/// Solver controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornParams {
    /// Inverse entropic temperature; larger values give sharper plans.
    pub lambda: f64,
    /// Target max-norm marginal violation.
    pub tol: f64,
    pub max_iter: usize,
    pub update: Update,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            lambda: 20.0,
            tol: 1e-6,
            max_iter: 200,
            update: Update::Newton,
        }
    }
}

impl SinkhornParams {
    pub fn new(lambda: f64, tol: f64, max_iter: usize) -> Self {
        Self {
            lambda,
            tol,
            max_iter,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Result of a Sinkhorn solve.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub q: Array2<f64>,
    /// `<Q, T>`: the transport cost of the plan.
    pub cost: f64,
    pub iterations: usize,
    /// Max-norm violation of either marginal at exit.
    pub marginal_err: f64,
    pub converged: bool,
    /// Log row scalings `log u`.
    pub log_u: Array1<f64>,
    /// Log column scalings `log v`.
    pub log_v: Array1<f64>,
}

/// `log(sum(exp(x)))` of an iterator; `-inf` when every term is `-inf`.
fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

const MIN_RIDGE: f64 = 1e-10;
const MAX_RIDGE: f64 = 1.0;

/// Row potentials `f_i = log r_i - LSE_j(M_ij + g_j)` and the row-wise
/// softmax `p_ij = exp(M_ij + g_j - LSE_j(M_ij + g_j))`.
struct RowState {
    f: Array1<f64>,
    p: Array2<f64>,
    /// `sum_i r_i LSE_j(M_ij + g_j)` over rows with mass.
    weighted_lse: f64,
}

fn normalize_rows(kernel: &Array2<f64>, g: &Array1<f64>, r: &Array1<f64>, log_r: &Array1<f64>) -> RowState {
    let (n, k) = kernel.dim();
    let mut f = Array1::from_elem(n, f64::NEG_INFINITY);
    let mut p = Array2::zeros((n, k));
    let mut weighted_lse = 0.0;
    for i in 0..n {
        let row = kernel.row(i);
        let lse = log_sum_exp(row.iter().zip(g.iter()).map(|(m, gj)| m + gj));
        if r[i] > 0.0 {
            f[i] = log_r[i] - lse;
            weighted_lse += r[i] * lse;
        }
        for j in 0..k {
            p[[i, j]] = (row[j] + g[j] - lse).exp();
        }
    }
    RowState { f, p, weighted_lse }
}

/// Semi-dual objective `sum_j c_j g_j - sum_i r_i LSE_j(M_ij + g_j)`,
/// concave in `g`; its gradient is `c - Q^T 1`.
fn semi_dual(g: &Array1<f64>, c: &Array1<f64>, rows: &RowState) -> f64 {
    let linear: f64 = g
        .iter()
        .zip(c.iter())
        .filter(|(_, cj)| **cj > 0.0)
        .map(|(gj, cj)| gj * cj)
        .sum();
    linear - rows.weighted_lse
}

fn column_violation(p: &Array2<f64>, r: &Array1<f64>, c: &Array1<f64>) -> f64 {
    p.t()
        .dot(r)
        .iter()
        .zip(c.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn alternating_g(kernel: &Array2<f64>, f: &Array1<f64>, log_c: &Array1<f64>) -> Array1<f64> {
    Array1::from_shape_fn(kernel.ncols(), |j| {
        if log_c[j] == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            let col = kernel.column(j);
            log_c[j] - log_sum_exp(col.iter().zip(f.iter()).map(|(m, fi)| m + fi))
        }
    })
}

/// Newton direction for the semi-dual restricted to columns with mass, or
/// `None` if the system cannot be factored.
fn newton_direction(
    p: &Array2<f64>,
    r: &Array1<f64>,
    s: &Array1<f64>,
    c: &Array1<f64>,
    ridge: f64,
) -> Option<Array1<f64>> {
    let active: Vec<usize> = (0..c.len()).filter(|&j| c[j] > 0.0).collect();
    let m = active.len();
    // negative Hessian: diag(s) - sum_i r_i p_i p_i^T, a Laplacian with null space 1
    let mut h = nalgebra::DMatrix::<f64>::zeros(m, m);
    for (i, row) in p.rows().into_iter().enumerate() {
        if r[i] == 0.0 {
            continue;
        }
        for (a, &ja) in active.iter().enumerate() {
            let pa = r[i] * row[ja];
            if pa == 0.0 {
                continue;
            }
            for (b, &jb) in active.iter().enumerate().skip(a) {
                h[(a, b)] -= pa * row[jb];
            }
        }
    }
    let scale = active.iter().map(|&j| s[j]).fold(0.0, f64::max);
    for (a, &ja) in active.iter().enumerate() {
        h[(a, a)] += s[ja] + ridge * scale;
        for b in a + 1..m {
            h[(b, a)] = h[(a, b)];
        }
    }
    // fixes the shift gauge: the gradient sums to zero, so this only removes the 1 direction
    h.add_scalar_mut(scale / m as f64);
    let grad = nalgebra::DVector::from_iterator(m, active.iter().map(|&j| c[j] - s[j]));
    let step = h.cholesky()?.solve(&grad);
    let mut d = Array1::zeros(c.len());
    for (a, &ja) in active.iter().enumerate() {
        d[ja] = step[a];
    }
    d.iter().all(|v| v.is_finite()).then_some(d)
}

/// Solves the entropic transport problem for `cost` between the given marginals.
///
/// Every iteration normalizes the rows exactly and then updates the column
/// potentials. The plan always has the scaling form, and convergence is
/// declared once the column marginals are met to `tol`. Non-convergence
/// within `max_iter` is reported through [`TransportPlan::converged`], not
/// as an error.
pub fn solve(cost: &CostMatrix, marginals: &MarginalPair, params: &SinkhornParams) -> Result<TransportPlan> {
    params.validate()?;
    let (n, k) = cost.dim();
    let (r, c) = (marginals.r(), marginals.c());
    if r.len() != n || c.len() != k {
        return Err(shape_err(format!(
            "cost is {n}x{k} but marginals have lengths {} and {}",
            r.len(),
            c.len()
        )));
    }

    let kernel = cost.view().mapv(|t| -params.lambda * t);
    if let Some(((i, j), _)) = kernel.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "kernel exponent overflows at row {i}, column {j}"
        )));
    }
    let log_r = r.mapv(f64::ln);
    let log_c = c.mapv(f64::ln);

    let mut g = log_c.mapv(|v| if v == f64::NEG_INFINITY { v } else { 0.0 });
    let mut rows = normalize_rows(&kernel, &g, r, &log_r);
    let mut iterations = 0;
    let mut ridge = MIN_RIDGE;

    while iterations < params.max_iter {
        iterations += 1;
        let s = rows.p.t().dot(r);
        let err = column_violation(&rows.p, r, c);
        if err <= params.tol {
            break;
        }
        let next = match params.update {
            Update::Alternating => None,
            Update::Newton => {
                let base = semi_dual(&g, c, &rows);
                let mut found = None;
                while found.is_none() && ridge <= MAX_RIDGE {
                    found = newton_direction(&rows.p, r, &s, c, ridge).and_then(|d| {
                        let slope: f64 = d
                            .iter()
                            .zip(c.iter().zip(s.iter()))
                            .map(|(dj, (cj, sj))| dj * (cj - sj))
                            .sum();
                        let mut t = 1.0;
                        for _ in 0..8 {
                            let trial = &g + &(&d * t);
                            let trial_rows = normalize_rows(&kernel, &trial, r, &log_r);
                            if semi_dual(&trial, c, &trial_rows) >= base + 1e-4 * t * slope {
                                return Some((trial, trial_rows, t));
                            }
                            t *= 0.5;
                        }
                        None
                    });
                    if found.is_none() {
                        ridge *= 100.0;
                    }
                }
                found.map(|(trial, trial_rows, t)| {
                    if t == 1.0 {
                        ridge = (ridge * 0.1).max(MIN_RIDGE);
                    }
                    (trial, trial_rows)
                })
            }
        };
        (g, rows) = match next {
            Some(v) => v,
            None => {
                ridge = MIN_RIDGE;
                let g_alt = alternating_g(&kernel, &rows.f, &log_c);
                let rows_alt = normalize_rows(&kernel, &g_alt, r, &log_r);
                (g_alt, rows_alt)
            }
        };
    }

    let f = rows.f;
    for (i, fi) in f.iter().enumerate() {
        if fi.is_nan() || (*fi == f64::INFINITY) || (r[i] > 0.0 && !fi.is_finite()) {
            return Err(Error::Numerical(format!("row {i} scaling broke down ({fi})")));
        }
    }
    for (j, gj) in g.iter().enumerate() {
        if gj.is_nan() || (*gj == f64::INFINITY) || (c[j] > 0.0 && !gj.is_finite()) {
            return Err(Error::Numerical(format!("column {j} scaling broke down ({gj})")));
        }
    }

    let q = plan_from_potentials(&kernel, &f, &g);
    let err = marginal_violation(&q, r, c);
    let total = transport_cost(&q, cost)?;
    Ok(TransportPlan {
        q,
        cost: total,
        iterations,
        marginal_err: err,
        converged: err <= params.tol,
        log_u: f,
        log_v: g,
    })
}

fn plan_from_potentials(kernel: &Array2<f64>, f: &Array1<f64>, g: &Array1<f64>) -> Array2<f64> {
    let mut q = kernel.clone();
    Zip::indexed(&mut q).for_each(|(i, j), v| *v = (*v + f[i] + g[j]).exp());
    q
}

/// Max-norm violation of the row and column marginals by `q`.
pub fn marginal_violation(q: &Array2<f64>, r: &Array1<f64>, c: &Array1<f64>) -> f64 {
    let rows = q
        .rows()
        .into_iter()
        .zip(r.iter())
        .map(|(row, ri)| (row.sum() - ri).abs());
    let cols = q
        .columns()
        .into_iter()
        .zip(c.iter())
        .map(|(col, cj)| (col.sum() - cj).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Entry-wise product of plan and cost, summed.
pub fn transport_cost(q: &Array2<f64>, cost: &CostMatrix) -> Result<f64> {
    if q.dim() != cost.dim() {
        return Err(shape_err(format!(
            "plan shape {:?} differs from cost shape {:?}",
            q.dim(),
            cost.dim()
        )));
    }
    Ok(Zip::from(q).and(cost.view()).fold(0.0, |acc, a, b| acc + a * b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn half() -> MarginalPair {
        MarginalPair::new(array![0.5, 0.5], array![0.5, 0.5]).unwrap()
    }

    #[test]
    fn zero_cost_gives_product_coupling() {
        let t = CostMatrix::new(Array2::zeros((2, 2))).unwrap();
        let plan = solve(&t, &half(), &SinkhornParams::default()).unwrap();
        for v in plan.q.iter() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-12);
        }
        assert_eq!(plan.cost, 0.0);
        assert!(plan.converged);
    }

    #[test]
    fn sharp_plan_concentrates_on_diagonal() {
        let t = CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let params = SinkhornParams {
            lambda: 100.0,
            ..Default::default()
        };
        let plan = solve(&t, &half(), &params).unwrap();
        let expected = array![[0.5, 0.0], [0.0, 0.5]];
        for (a, b) in plan.q.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-3);
        }
        assert!(plan.cost <= 1e-3);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(CostMatrix::new(array![[f64::NAN]]).is_err());
        assert!(CostMatrix::new(Array2::zeros((0, 2))).is_err());
        assert!(MarginalPair::new(array![0.5, 0.6], array![1.0]).is_err());
        assert!(MarginalPair::new(array![1.5, -0.5], array![1.0]).is_err());
        let t = CostMatrix::new(Array2::zeros((3, 2))).unwrap();
        assert!(matches!(
            solve(&t, &half(), &SinkhornParams::default()),
            Err(Error::Shape(_))
        ));
        let t = CostMatrix::new(Array2::zeros((2, 2))).unwrap();
        let bad = SinkhornParams {
            lambda: 0.0,
            ..Default::default()
        };
        assert!(matches!(solve(&t, &half(), &bad), Err(Error::Config(_))));
    }

    #[test]
    fn kernel_overflow_is_numerical() {
        let t = CostMatrix::new(array![[f64::MAX, 0.0], [0.0, 0.0]]).unwrap();
        let err = solve(&t, &half(), &SinkhornParams::default()).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn zero_mass_rows_get_no_transport() {
        let t = CostMatrix::new(array![[0.3, 0.1], [0.2, 0.9], [0.5, 0.5]]).unwrap();
        let m = MarginalPair::new(array![0.5, 0.0, 0.5], array![0.25, 0.75]).unwrap();
        let plan = solve(&t, &m, &SinkhornParams::default()).unwrap();
        assert!(plan.converged);
        assert_eq!(plan.q.row(1).sum(), 0.0);
    }

    #[test]
    fn reports_non_convergence() {
        let t = CostMatrix::new(array![[0.0, 1.0, 0.3], [1.0, 0.0, 0.7]]).unwrap();
        let m = MarginalPair::new(array![0.9, 0.1], array![0.2, 0.3, 0.5]).unwrap();
        let params = SinkhornParams::new(50.0, 1e-14, 1);
        let plan = solve(&t, &m, &params).unwrap();
        assert_eq!(plan.iterations, 1);
        assert!(!plan.converged);
        assert!(plan.marginal_err > 1e-14);
    }

    #[test]
    fn transport_cost_simple() {
        let t = CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(transport_cost(&array![[0.5, 0.0], [0.0, 0.5]], &t).unwrap(), 0.0);
        let zeros = CostMatrix::new(Array2::zeros((2, 2))).unwrap();
        assert_eq!(transport_cost(&array![[0.1, 0.7], [0.2, 0.0]], &zeros).unwrap(), 0.0);
        assert!(transport_cost(&Array2::zeros((3, 2)), &t).is_err());
    }

    #[test]
    fn both_updates_reach_the_same_plan() {
        let t = CostMatrix::new(array![
            [0.2, 0.9, 0.4],
            [0.7, 0.1, 0.3],
            [0.5, 0.6, 0.0],
            [0.3, 0.3, 0.8]
        ])
        .unwrap();
        let m = MarginalPair::new(array![0.1, 0.2, 0.3, 0.4], array![0.5, 0.3, 0.2]).unwrap();
        let newton = solve(&t, &m, &SinkhornParams::new(10.0, 1e-10, 200)).unwrap();
        let plain = SinkhornParams {
            update: Update::Alternating,
            ..SinkhornParams::new(10.0, 1e-10, 100_000)
        };
        let plain = solve(&t, &m, &plain).unwrap();
        assert!(newton.converged && plain.converged);
        assert!(newton.iterations <= plain.iterations);
        for (a, b) in newton.q.iter().zip(plain.q.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-8);
        }
    }

    #[test]
    fn zero_mass_column_stays_empty() {
        let t = CostMatrix::new(array![[0.3, 0.1, 0.4], [0.2, 0.9, 0.0]]).unwrap();
        let m = MarginalPair::new(array![0.4, 0.6], array![0.7, 0.0, 0.3]).unwrap();
        let plan = solve(&t, &m, &SinkhornParams::new(50.0, 1e-9, 200)).unwrap();
        assert!(plan.converged);
        assert_eq!(plan.q.column(1).sum(), 0.0);
    }
}
