//! Centroid pooling and the dense/global self-distillation losses.
//!
//! Everything here is forward-only: projections are a single affine map
//! followed by a tempered softmax, and losses are cross-entropies between
//! teacher and student distributions of the opposite view.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{shape_err, Error, Result};
use crate::features::FeatureMatrix;

/// Lower clamp applied to student probabilities before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;
/// Default dense projection width.
pub const DEFAULT_L: usize = 8192;
/// Default global projection width.
pub const DEFAULT_L_GLOBAL: usize = 65536;
pub const DEFAULT_TAU_T: f64 = 0.07;
pub const DEFAULT_TAU_S: f64 = 0.1;

const ROW_TOL: f64 = 1e-9;

/// Affine map to logit space plus a softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    /// `L x d`.
    weight: Array2<f64>,
    bias: Array1<f64>,
    temperature: f64,
}

impl ProjectionParams {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>, temperature: f64) -> Result<Self> {
        if weight.nrows() == 0 || weight.ncols() == 0 {
            return Err(shape_err(format!(
                "projection weight must be non-empty, got {:?}",
                weight.dim()
            )));
        }
        if bias.len() != weight.nrows() {
            return Err(shape_err(format!(
                "bias has {} entries, weight has {} rows",
                bias.len(),
                weight.nrows()
            )));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("projection parameters must be finite".into()));
        }
        Ok(Self {
            weight,
            bias,
            temperature,
        })
    }

    /// Same map with another temperature (teacher and student share the head).
    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        Self::new(self.weight.clone(), self.bias.clone(), temperature)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }
}

/// Row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRows(Array2<f64>);

impl ProbRows {
    pub fn new(p: Array2<f64>) -> Result<Self> {
        if p.nrows() == 0 || p.ncols() == 0 {
            return Err(shape_err(format!(
                "probability rows must be non-empty, got {:?}",
                p.dim()
            )));
        }
        for (i, row) in p.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Input(format!("row {i} has negative or non-finite entries")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > ROW_TOL {
                return Err(Error::Input(format!("row {i} sums to {s}, expected 1")));
            }
        }
        Ok(Self(p))
    }

    /// Single-row distribution.
    pub fn from_vec(p: Vec<f64>) -> Result<Self> {
        let n = p.len();
        Self::new(Array2::from_shape_vec((1, n), p).map_err(|e| shape_err(e.to_string()))?)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be nonnegative, got {alpha}")));
        }
        Ok(Self { alpha })
    }
}

/// `C^T = Z^T Q`: centroid `k` is `sum_n q_nk z_n`.
pub fn pool_centroids(z: &FeatureMatrix, q: &Array2<f64>) -> Result<Array2<f64>> {
    if z.rows() != q.nrows() {
        return Err(shape_err(format!(
            "features have {} rows, assignments have {}",
            z.rows(),
            q.nrows()
        )));
    }
    Ok(q.t().dot(&z.to_f64()))
}

/// Row `k` is `softmax((W c_k + b) / tau)`.
pub fn project_softmax(c: &Array2<f64>, p: &ProjectionParams) -> Result<ProbRows> {
    if c.ncols() != p.in_dim() {
        return Err(shape_err(format!(
            "centroids have dimension {}, projection expects {}",
            c.ncols(),
            p.in_dim()
        )));
    }
    if c.nrows() == 0 {
        return Err(shape_err("no centroids to project"));
    }
    let mut logits = c.dot(&p.weight.t());
    logits += &p.bias;
    logits /= p.temperature;
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    ProbRows::new(logits)
}

/// `H(a, b) = -(1/K) sum_k sum_l a_kl log b_kl`, with `b` clamped at
/// [`LOG_CLAMP`] and zero entries of `a` contributing nothing.
pub fn cross_entropy_rows(a: &ProbRows, b: &ProbRows) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_err(format!(
            "teacher rows {:?} and student rows {:?} differ in shape",
            a.dim(),
            b.dim()
        )));
    }
    let mut total = 0.0;
    for (ra, rb) in a.0.rows().into_iter().zip(b.0.rows()) {
        for (x, y) in ra.iter().zip(rb.iter()) {
            if *x > 0.0 {
                total -= x * y.max(LOG_CLAMP).ln();
            }
        }
    }
    Ok(total / a.0.nrows() as f64)
}

/// `1/2 (H(pt1, ps2) + H(pt2, ps1))` over linked centroids.
pub fn dense_loss(pt1: &ProbRows, ps2: &ProbRows, pt2: &ProbRows, ps1: &ProbRows) -> Result<f64> {
    Ok(0.5 * (cross_entropy_rows(pt1, ps2)? + cross_entropy_rows(pt2, ps1)?))
}

/// Same as [`dense_loss`] on single-row image-level distributions.
pub fn global_loss(pt1: &ProbRows, ps2: &ProbRows, pt2: &ProbRows, ps1: &ProbRows) -> Result<f64> {
    for p in [pt1, ps2, pt2, ps1] {
        if p.dim().0 != 1 {
            return Err(shape_err(format!(
                "global distributions must be a single row, got {:?}",
                p.dim()
            )));
        }
    }
    dense_loss(pt1, ps2, pt2, ps1)
}

/// `alpha * dense + glob`.
pub fn total_loss(dense: f64, glob: f64, w: LossWeights) -> f64 {
    w.alpha * dense + glob
}

/// Mean token of a view, used as its image-level representation.
pub fn mean_token(z: &FeatureMatrix) -> Array2<f64> {
    z.to_f64().mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn head(w: Array2<f64>, tau: f64) -> ProjectionParams {
        let l = w.nrows();
        ProjectionParams::new(w, Array1::zeros(l), tau).unwrap()
    }

    #[test]
    fn pool_identity_and_pair_mean() {
        let z = FeatureMatrix::new(array![[1.0f32, 2.0], [3.0, 5.0]]).unwrap();
        let c = pool_centroids(&z, &Array2::eye(2)).unwrap();
        assert_eq!(c, array![[1.0, 2.0], [3.0, 5.0]]);
        let c = pool_centroids(&z, &array![[0.5], [0.5]]).unwrap();
        assert_eq!(c, array![[2.0, 3.5]]);
        assert!(pool_centroids(&z, &array![[1.0]]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = project_softmax(&array![[1.0, 0.0]], &head(Array2::eye(2), 1.0)).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(p.view()[[0, 0]], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p.view()[[0, 0]], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(p.view()[[0, 1]], 0.2689, epsilon = 1e-4);
        let flat = project_softmax(&array![[2.0, 2.0, 2.0]], &head(Array2::eye(3), 0.07)).unwrap();
        for v in flat.view() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = project_softmax(&array![[1e4, -1e4, 0.0]], &head(Array2::eye(3), 0.07)).unwrap();
        assert_abs_diff_eq!(p.view().row(0).sum(), 1.0, epsilon = 1e-12);
        assert_eq!(p.view()[[0, 0]], 1.0);
    }

    #[test]
    fn lower_temperature_sharpens() {
        let c = array![[0.3, -0.1, 0.2]];
        let hot = project_softmax(&c, &head(Array2::eye(3), 0.1)).unwrap();
        let cold = project_softmax(&c, &head(Array2::eye(3), 0.07)).unwrap();
        let max = |p: &ProbRows| p.view().fold(0.0f64, |m, v| m.max(*v));
        assert!(max(&cold) > max(&hot));
    }

    #[test]
    fn cross_entropy_examples() {
        let one_hot = ProbRows::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(cross_entropy_rows(&one_hot, &one_hot).unwrap(), 0.0);
        let a = ProbRows::new(array![[0.1, 0.2, 0.3, 0.4], [1.0, 0.0, 0.0, 0.0]]).unwrap();
        let u = ProbRows::new(Array2::from_elem((2, 4), 0.25)).unwrap();
        assert_abs_diff_eq!(cross_entropy_rows(&a, &u).unwrap(), 4f64.ln(), epsilon = 1e-15);
        assert!(cross_entropy_rows(&a, &one_hot).is_err());
    }

    #[test]
    fn clamp_bounds_the_loss() {
        let a = ProbRows::from_vec(vec![1.0, 0.0]).unwrap();
        let b = ProbRows::from_vec(vec![0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(cross_entropy_rows(&a, &b).unwrap(), -LOG_CLAMP.ln(), epsilon = 1e-12);
    }

    #[test]
    fn global_uniform_is_log_width() {
        let l = DEFAULT_L_GLOBAL;
        let mut t = vec![0.0; l];
        t[7] = 1.0;
        let t = ProbRows::from_vec(t).unwrap();
        let u = ProbRows::from_vec(vec![1.0 / l as f64; l]).unwrap();
        let g = global_loss(&t, &u, &t, &u).unwrap();
        assert_abs_diff_eq!(g, (l as f64).ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(g, 11.0904, epsilon = 1e-4);
        assert_eq!(global_loss(&t, &t, &t, &t).unwrap(), 0.0);
    }

    #[test]
    fn dense_loss_rejects_unlinked_clusters() {
        let two = ProbRows::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let one = ProbRows::new(array![[1.0, 0.0]]).unwrap();
        assert!(dense_loss(&two, &one, &two, &two).is_err());
        assert!(global_loss(&two, &two, &two, &two).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(2.0, 3.0, LossWeights::default()), 5.0);
        assert_eq!(total_loss(2.0, 3.0, LossWeights::new(0.0).unwrap()), 3.0);
        assert!(LossWeights::new(-1.0).is_err());
    }

    #[test]
    fn rejects_invalid_params_and_rows() {
        assert!(ProjectionParams::new(Array2::eye(2), Array1::zeros(3), 1.0).is_err());
        assert!(ProjectionParams::new(Array2::eye(2), Array1::zeros(2), 0.0).is_err());
        assert!(ProjectionParams::new(array![[f64::NAN]], Array1::zeros(1), 1.0).is_err());
        assert!(ProbRows::new(array![[0.5, 0.4]]).is_err());
        assert!(ProbRows::new(array![[1.5, -0.5]]).is_err());
        assert!(project_softmax(&array![[1.0]], &head(Array2::eye(2), 1.0)).is_err());
    }
}
