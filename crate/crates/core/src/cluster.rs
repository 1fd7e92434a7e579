//! Join-locate-split clustering.
//!
//! Starting from `k_start` centroids sampled from the joint tokens, each outer
//! step builds the assignment cost (semantic, optionally biased by patch
//! distance), solves the entropic transport problem, records its transport
//! cost, re-estimates the centroids from the plan and merges the two most
//! cosine-similar centroids. After the `k = 2` step the plan with the lowest
//! transport cost is kept, rows are normalized and clusters that are not
//! hard-assigned in both views are pruned.

use std::thread;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::features::{split_assignments, AttentionMarginal, JointRepresentation, ViewPair};
use crate::sinkhorn::{self, CostMatrix, MarginalPair, SinkhornParams};

/// How the `k_start` initial centroid tokens are chosen from the attention marginal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitPolicy {
    /// Highest attention weights; ties go to the lower token index.
    TopK,
    /// Sequential sampling without replacement, proportional to attention.
    Multinomial { seed: u64 },
}

/// Centroid re-estimation after each transport solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentroidUpdate {
    /// `c_k = sum_n q_nk z_n / sum_n q_nk`: the plan-weighted mean of the tokens.
    MassWeighted,
    /// `C^T = Z^T Q` with no normalization. Centroid norms shrink with the
    /// column mass, which biases the transport-cost trace toward `k_start`.
    Unnormalized,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteringConfig {
    pub k_start: usize,
    pub lambda: f64,
    pub lambda_pos: f64,
    pub init: InitPolicy,
    pub tol: f64,
    pub max_iter: usize,
    pub update: CentroidUpdate,
    /// Cluster on the positional cost alone (the `lambda_pos -> inf` limit).
    pub positional_only: bool,
    /// Extra transport solves per step, each preceded by a centroid update,
    /// before the step's transport cost is recorded. Zero reproduces the
    /// single solve per step.
    pub refine_steps: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            k_start: 12,
            lambda: 20.0,
            lambda_pos: 4.0,
            init: InitPolicy::TopK,
            tol: 1e-6,
            max_iter: 200,
            update: CentroidUpdate::MassWeighted,
            positional_only: false,
            refine_steps: 1,
        }
    }
}

impl ClusteringConfig {
    pub fn sinkhorn_params(&self) -> SinkhornParams {
        SinkhornParams::new(self.lambda, self.tol, self.max_iter)
    }

    pub fn validate(&self, n_tokens: usize) -> Result<()> {
        if self.k_start < 2 {
            return Err(Error::Config(format!(
                "k_start must be at least 2, got {}",
                self.k_start
            )));
        }
        if self.k_start > n_tokens {
            return Err(Error::Config(format!(
                "k_start = {} exceeds the {n_tokens} joint tokens",
                self.k_start
            )));
        }
        if !(self.lambda_pos.is_finite() && self.lambda_pos >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_pos must be nonnegative, got {}",
                self.lambda_pos
            )));
        }
        self.sinkhorn_params().validate()
    }
}

/// Centroids, their composition over tokens and their positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringState {
    /// `k x d`.
    pub centroids: Array2<f64>,
    /// `2N x k`; each column is nonnegative and sums to one.
    pub indicator: Array2<f64>,
    /// `k x 2`.
    pub cen_positions: Array2<f64>,
}

impl ClusteringState {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }
}

fn select_tokens(marginal: &AttentionMarginal, k: usize, policy: InitPolicy) -> Vec<usize> {
    let w = marginal.weights();
    match policy {
        InitPolicy::TopK => {
            let mut idx: Vec<usize> = (0..w.len()).collect();
            // stable: equal weights keep ascending index order
            idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]));
            idx.truncate(k);
            idx
        }
        InitPolicy::Multinomial { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut remaining: Vec<usize> = (0..w.len()).collect();
            let mut picked = Vec::with_capacity(k);
            for _ in 0..k {
                let mass: f64 = remaining.iter().map(|&i| w[i]).sum();
                let pos = if mass > 0.0 {
                    let mut u = rng.random::<f64>() * mass;
                    let mut pos = remaining.len() - 1;
                    for (p, &i) in remaining.iter().enumerate() {
                        if w[i] > 0.0 && u < w[i] {
                            pos = p;
                            break;
                        }
                        u -= w[i];
                    }
                    // rounding can leave u past the last positive weight
                    while w[remaining[pos]] == 0.0 {
                        pos -= 1;
                    }
                    pos
                } else {
                    rng.random_range(0..remaining.len())
                };
                picked.push(remaining.remove(pos));
            }
            picked
        }
    }
}

/// Picks `k_start` tokens as initial centroids: one-hot indicator columns,
/// centroids `Y^T Z_cat` and positions `Y^T E_cat`.
pub fn init_centroids(vp: &ViewPair, cfg: &ClusteringConfig) -> Result<ClusteringState> {
    let n = vp.joint.n_tokens();
    cfg.validate(n)?;
    let chosen = select_tokens(&vp.marginal, cfg.k_start, cfg.init);
    let z = vp.joint.z_cat().to_f64();
    let mut indicator = Array2::zeros((n, cfg.k_start));
    for (col, &tok) in chosen.iter().enumerate() {
        indicator[[tok, col]] = 1.0;
    }
    let centroids = z.select(Axis(0), &chosen);
    let cen_positions = vp.positions.select(Axis(0), &chosen);
    Ok(ClusteringState {
        centroids,
        indicator,
        cen_positions,
    })
}

/// `T_sem = -Z_cat C^T` (raw dot products).
pub fn semantic_cost(z_cat: &JointRepresentation, centroids: &Array2<f64>) -> Result<CostMatrix> {
    semantic_cost_f64(&z_cat.z_cat().to_f64(), centroids)
}

pub(crate) fn semantic_cost_f64(z: &Array2<f64>, centroids: &Array2<f64>) -> Result<CostMatrix> {
    if z.ncols() != centroids.ncols() {
        return Err(shape_err(format!(
            "token dimension {} differs from centroid dimension {}",
            z.ncols(),
            centroids.ncols()
        )));
    }
    CostMatrix::new(-z.dot(&centroids.t()))
}

/// `c = softmax(Y^T r)`.
pub fn centroid_marginal(state: &ClusteringState, r: &AttentionMarginal) -> Result<Array1<f64>> {
    if state.indicator.nrows() != r.len() {
        return Err(shape_err(format!(
            "indicator has {} rows, marginal has {} entries",
            state.indicator.nrows(),
            r.len()
        )));
    }
    Ok(softmax(&state.indicator.t().dot(r.weights())))
}

pub(crate) fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let e = x.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// `T_pos[i, j] = |e_i - e_cen_j| / S`.
pub fn positional_cost(vp: &ViewPair, cen_positions: &Array2<f64>) -> Result<CostMatrix> {
    if cen_positions.ncols() != 2 {
        return Err(shape_err(format!(
            "centroid positions must be k x 2, got {:?}",
            cen_positions.dim()
        )));
    }
    let n = vp.positions.nrows();
    let k = cen_positions.nrows();
    let inv_s = 1.0 / vp.diag_s;
    let t = Array2::from_shape_fn((n, k), |(i, j)| {
        let dx = vp.positions[[i, 0]] - cen_positions[[j, 0]];
        let dy = vp.positions[[i, 1]] - cen_positions[[j, 1]];
        dx.hypot(dy) * inv_s
    });
    CostMatrix::new(t)
}

/// `T_tot = T_sem + lambda_pos T_pos`; `lambda_pos = 0` returns `t_sem` untouched.
pub fn total_cost(t_sem: &CostMatrix, t_pos: &CostMatrix, lambda_pos: f64) -> Result<CostMatrix> {
    if t_sem.dim() != t_pos.dim() {
        return Err(shape_err(format!(
            "semantic cost {:?} and positional cost {:?} differ in shape",
            t_sem.dim(),
            t_pos.dim()
        )));
    }
    if lambda_pos == 0.0 {
        return Ok(t_sem.clone());
    }
    CostMatrix::new(&t_sem.view() + &(&t_pos.view() * lambda_pos))
}

fn cosine(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Index pair `(i, j)`, `i < j`, of the two most cosine-similar centroids.
/// Ties resolve to the lexicographically smallest pair.
pub fn most_similar_pair(centroids: &Array2<f64>) -> Option<(usize, usize)> {
    let k = centroids.nrows();
    let mut best: Option<((usize, usize), f64)> = None;
    for i in 0..k {
        for j in i + 1..k {
            let sim = cosine(centroids.row(i), centroids.row(j));
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some(((i, j), sim));
            }
        }
    }
    best.map(|(p, _)| p)
}

/// Merges the most cosine-similar centroid pair. The merged centroid,
/// indicator column and position are the means of the parents; it takes the
/// lower index and the higher one is removed.
pub fn merge_most_similar(state: &ClusteringState) -> Result<ClusteringState> {
    let k = state.k();
    if k < 3 {
        return Err(Error::State(format!("cannot merge below two centroids (k = {k})")));
    }
    let (i, j) = most_similar_pair(&state.centroids).expect("k >= 3 has pairs");
    Ok(ClusteringState {
        centroids: merge_rows(&state.centroids, i, j),
        indicator: merge_rows(&state.indicator.t().to_owned(), i, j).t().to_owned(),
        cen_positions: merge_rows(&state.cen_positions, i, j),
    })
}

fn merge_rows(m: &Array2<f64>, i: usize, j: usize) -> Array2<f64> {
    let merged = (&m.row(i) + &m.row(j)) * 0.5;
    let keep: Vec<usize> = (0..m.nrows()).filter(|&r| r != j).collect();
    let mut out = m.select(Axis(0), &keep);
    out.row_mut(i).assign(&merged);
    out
}

fn update_centroids(z: &Array2<f64>, q: &Array2<f64>, update: CentroidUpdate) -> Array2<f64> {
    let c = q.t().dot(z);
    match update {
        CentroidUpdate::Unnormalized => c,
        CentroidUpdate::MassWeighted => {
            let mass = q.sum_axis(Axis(0));
            let mut c = c;
            for (mut row, m) in c.rows_mut().into_iter().zip(mass.iter()) {
                if *m > 0.0 {
                    row /= *m;
                }
            }
            c
        }
    }
}

/// Outcome of the locate phase, before pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct Located {
    /// `2N x k_selected` plan of the selected step, rows normalized to one.
    pub q_joint: Array2<f64>,
    pub k_selected: usize,
    /// `(k, transport cost)` for `k = k_start` down to `2`.
    pub dc_trace: Vec<(usize, f64)>,
    /// Whether every Sinkhorn solve met the tolerance.
    pub all_converged: bool,
}

/// Index of the minimum transport cost; ties prefer the smaller `k`.
pub fn select_k(trace: &[(usize, f64)]) -> Option<usize> {
    trace
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(k, _)| k)
}

fn step_cost(vp: &ViewPair, z: &Array2<f64>, state: &ClusteringState, cfg: &ClusteringConfig) -> Result<CostMatrix> {
    if cfg.positional_only {
        return positional_cost(vp, &state.cen_positions);
    }
    let t_sem = semantic_cost_f64(z, &state.centroids)?;
    if cfg.lambda_pos > 0.0 {
        total_cost(&t_sem, &positional_cost(vp, &state.cen_positions)?, cfg.lambda_pos)
    } else {
        Ok(t_sem)
    }
}

/// Runs the iterative transport/merge loop and selects the number of clusters.
pub fn locate(vp: &ViewPair, cfg: &ClusteringConfig) -> Result<Located> {
    let mut state = init_centroids(vp, cfg)?;
    let z = vp.joint.z_cat().to_f64();
    let r = vp.marginal.weights().clone();
    let params = cfg.sinkhorn_params();

    let mut trace = Vec::with_capacity(cfg.k_start - 1);
    let mut best: Option<(f64, usize, Array2<f64>)> = None;
    let mut all_converged = true;

    loop {
        let k = state.k();
        let marginals = MarginalPair::new(r.clone(), centroid_marginal(&state, &vp.marginal)?)?;
        let mut plan = sinkhorn::solve(&step_cost(vp, &z, &state, cfg)?, &marginals, &params)?;
        for _ in 0..cfg.refine_steps {
            all_converged &= plan.converged;
            state.centroids = update_centroids(&z, &plan.q, cfg.update);
            plan = sinkhorn::solve(&step_cost(vp, &z, &state, cfg)?, &marginals, &params)?;
        }
        all_converged &= plan.converged;
        trace.push((k, plan.cost));
        // later steps have smaller k, so `<=` keeps ties on the smaller k
        if best.as_ref().is_none_or(|(d, _, _)| plan.cost <= *d) {
            best = Some((plan.cost, k, plan.q.clone()));
        }
        state.centroids = update_centroids(&z, &plan.q, cfg.update);
        if k == 2 {
            break;
        }
        state = merge_most_similar(&state)?;
    }

    let (_, k_selected, q) = best.expect("at least one step");
    Ok(Located {
        q_joint: normalize_rows(q),
        k_selected,
        dc_trace: trace,
        all_converged,
    })
}

fn normalize_rows(mut q: Array2<f64>) -> Array2<f64> {
    let k = q.ncols();
    for mut row in q.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        } else {
            row.fill(1.0 / k as f64);
        }
    }
    q
}

/// Per-row argmax as a 0/1 matrix; ties go to the lower column.
pub fn hard_assign(q: &Array2<f64>) -> Array2<u8> {
    let mut m = Array2::zeros(q.dim());
    for (i, row) in q.rows().into_iter().enumerate() {
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        if q.ncols() > 0 {
            m[[i, best]] = 1;
        }
    }
    m
}

/// View-wise assignments after dropping clusters absent from either view.
#[derive(Debug, Clone, PartialEq)]
pub struct Pruned {
    pub q1: Array2<f64>,
    pub q2: Array2<f64>,
    pub hard1: Array2<u8>,
    pub hard2: Array2<u8>,
    /// Original column indices that were removed, ascending.
    pub dropped: Vec<usize>,
}

/// Drops every column that no token of view 1 or no token of view 2 is
/// hard-assigned to, then renormalizes the soft rows.
pub fn prune(q1: &Array2<f64>, q2: &Array2<f64>) -> Result<Pruned> {
    if q1.ncols() != q2.ncols() {
        return Err(shape_err(format!(
            "views have {} and {} clusters",
            q1.ncols(),
            q2.ncols()
        )));
    }
    let k = q1.ncols();
    let m1 = hard_assign(q1);
    let m2 = hard_assign(q2);
    let used1 = m1.sum_axis(Axis(0));
    let used2 = m2.sum_axis(Axis(0));
    let (keep, dropped): (Vec<usize>, Vec<usize>) = (0..k).partition(|&j| used1[j] > 0 && used2[j] > 0);
    if keep.is_empty() {
        return Err(Error::EmptyPrune { k });
    }
    Ok(Pruned {
        q1: normalize_rows(q1.select(Axis(1), &keep)),
        q2: normalize_rows(q2.select(Axis(1), &keep)),
        hard1: m1.select(Axis(1), &keep),
        hard2: m2.select(Axis(1), &keep),
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult {
    /// `2N x K'` soft assignments after pruning; rows sum to one.
    pub q_joint: Array2<f64>,
    pub q_view1: Array2<f64>,
    pub q_view2: Array2<f64>,
    pub hard1: Array2<u8>,
    pub hard2: Array2<u8>,
    /// Number of clusters chosen before pruning.
    pub k_selected: usize,
    pub dc_trace: Vec<(usize, f64)>,
    /// Indices (into the `k_selected` columns) dropped by pruning.
    pub dropped: Vec<usize>,
    pub all_converged: bool,
}

impl ClusteringResult {
    pub fn pruned(&self) -> usize {
        self.dropped.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.q_joint.ncols()
    }
}

/// Full pipeline for one image: locate, split per view, prune.
pub fn run(vp: &ViewPair, cfg: &ClusteringConfig) -> Result<ClusteringResult> {
    let located = locate(vp, cfg)?;
    let (q1, q2) = split_assignments(&located.q_joint, vp.n_per_view())?;
    let p = prune(&q1, &q2)?;
    let q_joint = concatenate(Axis(0), &[p.q1.view(), p.q2.view()]).map_err(|e| shape_err(e.to_string()))?;
    Ok(ClusteringResult {
        q_joint,
        q_view1: p.q1,
        q_view2: p.q2,
        hard1: p.hard1,
        hard2: p.hard2,
        k_selected: located.k_selected,
        dc_trace: located.dc_trace,
        dropped: p.dropped,
        all_converged: located.all_converged,
    })
}

/// Head-wise results and their column-wise concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadResult {
    pub q_joint: Array2<f64>,
    pub q_view1: Array2<f64>,
    pub q_view2: Array2<f64>,
    pub hard1: Array2<u8>,
    pub hard2: Array2<u8>,
    /// Per-head results in input order.
    pub heads: Vec<ClusteringResult>,
}

impl MultiHeadResult {
    /// Column range of each head inside the concatenated matrices.
    pub fn head_columns(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.heads
            .iter()
            .map(|h| {
                let r = start..start + h.n_clusters();
                start = r.end;
                r
            })
            .collect()
    }
}

/// Clusters every head independently (concurrently) and concatenates the
/// pruned assignments along the cluster axis, in head order.
pub fn multi_head_run(per_head: &[ViewPair], cfg: &ClusteringConfig) -> Result<MultiHeadResult> {
    let first = per_head
        .first()
        .ok_or_else(|| Error::Input("multi-head clustering needs at least one head".into()))?;
    let n = first.n_per_view();
    if let Some((h, vp)) = per_head.iter().enumerate().find(|(_, vp)| vp.n_per_view() != n) {
        return Err(shape_err(format!(
            "head {h} has {} tokens per view, head 0 has {n}",
            vp.n_per_view()
        )));
    }

    let heads: Vec<ClusteringResult> = thread::scope(|scope| {
        let handles: Vec<_> = per_head.iter().map(|vp| scope.spawn(move || run(vp, cfg))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("clustering worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;

    let cat_f = |get: fn(&ClusteringResult) -> &Array2<f64>| {
        let views: Vec<_> = heads.iter().map(|h| get(h).view()).collect();
        concatenate(Axis(1), &views).map_err(|e| shape_err(e.to_string()))
    };
    let cat_u = |get: fn(&ClusteringResult) -> &Array2<u8>| {
        let views: Vec<_> = heads.iter().map(|h| get(h).view()).collect();
        concatenate(Axis(1), &views).map_err(|e| shape_err(e.to_string()))
    };
    Ok(MultiHeadResult {
        q_joint: cat_f(|h| &h.q_joint)?,
        q_view1: cat_f(|h| &h.q_view1)?,
        q_view2: cat_f(|h| &h.q_view2)?,
        hard1: cat_u(|h| &h.hard1)?,
        hard2: cat_u(|h| &h.hard2)?,
        heads,
    })
}
