//! Token features, attention marginals and crop geometry.
//!
//! Two augmented views of one image each contribute an `N x d` token matrix.
//! Clustering happens once in the joint space (the two matrices stacked
//! along the token axis) and the resulting assignments are split back per
//! view. Patch positions are expressed in the pixel frame of the original
//! image so that both views share one coordinate system.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use crate::error::{shape_err, Error, Result};

/// Dense `N x d` token representations of one view, stored as binary32.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f32>,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        let (n, d) = data.dim();
        if n == 0 || d == 0 {
            return Err(shape_err(format!("feature matrix must be at least 1x1, got {n}x{d}")));
        }
        if let Some((idx, v)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite feature value {v} at ({}, {})",
                idx.0, idx.1
            )));
        }
        Ok(Self { data })
    }

    /// Builds a matrix from row-major values.
    pub fn from_shape_vec(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        let data = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| shape_err(format!("{rows}x{cols} from flat buffer: {e}")))?;
        Self::new(data)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    /// Widened copy used by the double-precision numerics.
    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.data
    }
}

/// Two views stacked along the token axis: rows `0..N` are view 1, `N..2N` view 2.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRepresentation {
    z_cat: FeatureMatrix,
    n_per_view: usize,
}

impl JointRepresentation {
    pub fn z_cat(&self) -> &FeatureMatrix {
        &self.z_cat
    }

    pub fn n_per_view(&self) -> usize {
        self.n_per_view
    }

    pub fn n_tokens(&self) -> usize {
        2 * self.n_per_view
    }

    pub fn dim(&self) -> usize {
        self.z_cat.cols()
    }
}

/// Concatenates two views' token matrices into the joint representation.
pub fn join(z1: &FeatureMatrix, z2: &FeatureMatrix) -> Result<JointRepresentation> {
    if z1.dim() != z2.dim() {
        return Err(shape_err(format!(
            "cannot join views of shape {:?} and {:?}",
            z1.dim(),
            z2.dim()
        )));
    }
    let data = concatenate(Axis(0), &[z1.view(), z2.view()]).map_err(|e| shape_err(e.to_string()))?;
    Ok(JointRepresentation {
        z_cat: FeatureMatrix { data },
        n_per_view: z1.rows(),
    })
}

/// Splits a `2N x K` joint assignment matrix into its two `N x K` view blocks.
pub fn split_assignments(q: &Array2<f64>, n_per_view: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    if n_per_view == 0 {
        return Err(shape_err("tokens per view must be at least 1"));
    }
    if q.nrows() != 2 * n_per_view {
        return Err(shape_err(format!(
            "assignment matrix has {} rows, expected 2 x {n_per_view}",
            q.nrows()
        )));
    }
    Ok((
        q.slice(s![..n_per_view, ..]).to_owned(),
        q.slice(s![n_per_view.., ..]).to_owned(),
    ))
}

/// Token distribution over the `2N` joint tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMarginal {
    weights: Array1<f64>,
}

impl AttentionMarginal {
    /// Renormalizes nonnegative weights onto the simplex.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(shape_err("attention marginal is empty"));
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !w.is_finite() || **w < 0.0) {
            return Err(Error::Input(format!(
                "attention weight {w} at index {i} is not a finite nonnegative value"
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Input("attention weights sum to zero".into()));
        }
        Ok(Self {
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    /// Concatenates per-view attention vectors and renormalizes the result.
    pub fn from_views(view1: &[f64], view2: &[f64]) -> Result<Self> {
        if view1.len() != view2.len() {
            return Err(shape_err(format!(
                "per-view attention lengths differ: {} vs {}",
                view1.len(),
                view2.len()
            )));
        }
        Self::new(view1.iter().chain(view2).copied().collect())
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0; n])
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Pixel dimensions of the original (un-augmented) image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl ImageSize {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0) {
            return Err(Error::Input(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    /// Length of the image diagonal; no two points inside the image are farther apart.
    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }
}

/// Placement of one view's crop inside the original image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropGeometry {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
    /// Patches per side of the view's token grid.
    pub grid_n: usize,
    pub hflip: bool,
}

impl CropGeometry {
    pub fn new(x0: f64, y0: f64, width: f64, height: f64, grid_n: usize, hflip: bool) -> Result<Self> {
        let geom = Self {
            x0,
            y0,
            width,
            height,
            grid_n,
            hflip,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x0, self.y0, self.width, self.height]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Input(format!("non-finite crop geometry {self:?}")));
        }
        if self.width <= 0.0 || self.height <= 0.0 {
            return Err(Error::Input(format!(
                "crop size must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        if self.grid_n == 0 {
            return Err(Error::Input("crop grid must have at least one patch".into()));
        }
        Ok(())
    }

    /// Checks that the crop rectangle lies inside the original image.
    pub fn check_within(&self, image: &ImageSize) -> Result<()> {
        self.validate()?;
        if self.x0 < 0.0 || self.y0 < 0.0 || self.x0 + self.width > image.width || self.y0 + self.height > image.height
        {
            return Err(Error::Input(format!(
                "crop ({}, {}, {}x{}) exceeds image bounds {}x{}",
                self.x0, self.y0, self.width, self.height, image.width, image.height
            )));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.grid_n * self.grid_n
    }
}

/// Patch-center coordinates (`N x 2`, columns x then y) in original-image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGrid {
    pub coords: Array2<f64>,
}

/// Centers of the view's patches in original-image coordinates, row-major over
/// the view's grid. A horizontal flip mirrors the column index.
pub fn patch_positions(geom: &CropGeometry) -> PositionGrid {
    let n = geom.grid_n;
    let cell_w = geom.width / n as f64;
    let cell_h = geom.height / n as f64;
    let mut coords = Array2::zeros((n * n, 2));
    for i in 0..n {
        for j in 0..n {
            let col = if geom.hflip { n - 1 - j } else { j };
            let row = i * n + j;
            coords[[row, 0]] = geom.x0 + (col as f64 + 0.5) * cell_w;
            coords[[row, 1]] = geom.y0 + (i as f64 + 0.5) * cell_h;
        }
    }
    PositionGrid { coords }
}

/// Everything the clustering needs about one image: joint tokens, token
/// marginal, joint patch positions and the positional normalizer `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub joint: JointRepresentation,
    pub marginal: AttentionMarginal,
    /// `2N x 2` concatenated patch coordinates.
    pub positions: Array2<f64>,
    /// Positional normalizer in pixels.
    pub diag_s: f64,
}

impl ViewPair {
    pub fn new(
        joint: JointRepresentation,
        marginal: AttentionMarginal,
        positions: Array2<f64>,
        diag_s: f64,
    ) -> Result<Self> {
        let n = joint.n_tokens();
        if marginal.len() != n {
            return Err(shape_err(format!(
                "attention marginal has {} entries, joint representation has {n} tokens",
                marginal.len()
            )));
        }
        if positions.dim() != (n, 2) {
            return Err(shape_err(format!(
                "positions have shape {:?}, expected ({n}, 2)",
                positions.dim()
            )));
        }
        if !(diag_s.is_finite() && diag_s > 0.0) {
            return Err(Error::Input(format!(
                "positional normalizer must be positive, got {diag_s}"
            )));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite patch position".into()));
        }
        Ok(Self {
            joint,
            marginal,
            positions,
            diag_s,
        })
    }

    /// Joins two views and derives positions from their crop geometry.
    /// `S` is the diagonal of the original image.
    pub fn assemble(
        z1: &FeatureMatrix,
        z2: &FeatureMatrix,
        marginal: AttentionMarginal,
        geom1: &CropGeometry,
        geom2: &CropGeometry,
        image: &ImageSize,
    ) -> Result<Self> {
        geom1.check_within(image)?;
        geom2.check_within(image)?;
        for (geom, z) in [(geom1, z1), (geom2, z2)] {
            if geom.n_patches() != z.rows() {
                return Err(shape_err(format!(
                    "crop grid {0}x{0} does not match {1} tokens",
                    geom.grid_n,
                    z.rows()
                )));
            }
        }
        let joint = join(z1, z2)?;
        let e1 = patch_positions(geom1).coords;
        let e2 = patch_positions(geom2).coords;
        let positions = concatenate(Axis(0), &[e1.view(), e2.view()]).map_err(|e| shape_err(e.to_string()))?;
        Self::new(joint, marginal, positions, image.diagonal())
    }

    pub fn n_per_view(&self) -> usize {
        self.joint.n_per_view()
    }

    /// Same tokens and marginal with different features (used for per-head runs).
    pub fn with_features(&self, z1: &FeatureMatrix, z2: &FeatureMatrix) -> Result<Self> {
        let joint = join(z1, z2)?;
        Self::new(joint, self.marginal.clone(), self.positions.clone(), self.diag_s)
    }
}
