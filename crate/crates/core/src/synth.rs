//! Synthetic view pairs with known cluster labels.
//!
//! The original image is split into vertical stripes; every stripe carries
//! one feature blob (a Gaussian around a center, centers mutually orthogonal
//! and `separation` apart). Two crops spanning the full image width are
//! taken from the top and the bottom of the image, so every stripe is visible
//! in both views and the vertical overlap of the crops is configurable.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::features::{patch_positions, AttentionMarginal, CropGeometry, FeatureMatrix, ImageSize, ViewPair};

/// Pixel size of one patch in the synthetic original image.
pub const PATCH_PX: f64 = 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub blobs: usize,
    /// Euclidean distance between any two blob centers.
    pub separation: f64,
    pub sigma: f64,
    /// Tokens per view; must be a perfect square.
    pub n_per_view: usize,
    pub dim: usize,
    pub seed: u64,
    /// Fraction of each crop's height shared with the other crop, in `(0, 1]`.
    pub overlap: f64,
    /// Blob id of each stripe, left to right. `None` puts blob `b` in stripe `b`.
    pub stripes: Option<Vec<usize>>,
}

impl SynthSpec {
    pub fn new(blobs: usize, separation: f64, sigma: f64, n_per_view: usize, dim: usize, seed: u64) -> Self {
        Self {
            blobs,
            separation,
            sigma,
            n_per_view,
            dim,
            seed,
            overlap: 0.5,
            stripes: None,
        }
    }

    fn grid_n(&self) -> Result<usize> {
        let g = (self.n_per_view as f64).sqrt().round() as usize;
        if g == 0 || g * g != self.n_per_view {
            return Err(Error::Config(format!(
                "tokens per view must be a positive perfect square, got {}",
                self.n_per_view
            )));
        }
        Ok(g)
    }

    fn stripe_layout(&self) -> Vec<usize> {
        self.stripes.clone().unwrap_or_else(|| (0..self.blobs).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_n()?;
        if self.blobs == 0 {
            return Err(Error::Config("at least one blob is required".into()));
        }
        if self.dim < self.blobs {
            return Err(Error::Config(format!(
                "dimension {} cannot hold {} orthogonal blob centers",
                self.dim, self.blobs
            )));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::Config(format!("invalid separation {}", self.separation)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!("invalid sigma {}", self.sigma)));
        }
        if !(self.overlap > 0.0 && self.overlap <= 1.0) {
            return Err(Error::Config(format!(
                "overlap must lie in (0, 1], got {}",
                self.overlap
            )));
        }
        let layout = self.stripe_layout();
        if layout.is_empty() || layout.iter().any(|&b| b >= self.blobs) {
            return Err(Error::Config(format!(
                "stripe layout {layout:?} references unknown blobs"
            )));
        }
        Ok(())
    }
}

/// A generated view pair together with everything needed to score it.
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub view1: FeatureMatrix,
    pub view2: FeatureMatrix,
    pub geom1: CropGeometry,
    pub geom2: CropGeometry,
    pub image: ImageSize,
    pub pair: ViewPair,
    /// Blob id of every joint token (`2N`).
    pub labels: Vec<usize>,
    /// Stripe index of every joint token (`2N`).
    pub stripes: Vec<usize>,
}

impl SynthPair {
    pub fn grid_n(&self) -> usize {
        self.geom1.grid_n
    }
}

/// Mutually orthogonal centers scaled so that every pair is `separation` apart.
fn blob_centers(rng: &mut ChaCha8Rng, blobs: usize, dim: usize, separation: f64) -> Array2<f64> {
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(blobs);
    while basis.len() < blobs {
        let mut v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let proj = v.dot(b);
            v.scaled_add(-proj, b);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            basis.push(v / norm);
        }
    }
    let scale = separation / std::f64::consts::SQRT_2;
    let mut centers = Array2::zeros((blobs, dim));
    for (mut row, b) in centers.rows_mut().into_iter().zip(&basis) {
        row.assign(&(b * scale));
    }
    centers
}

pub fn generate(spec: &SynthSpec) -> Result<SynthPair> {
    spec.validate()?;
    let grid_n = spec.grid_n()?;
    let side = grid_n as f64 * PATCH_PX;
    let image = ImageSize::new(side, side)?;
    let crop_h = side / (2.0 - spec.overlap);
    let geom1 = CropGeometry::new(0.0, 0.0, side, crop_h, grid_n, false)?;
    let geom2 = CropGeometry::new(0.0, side - crop_h, side, crop_h, grid_n, false)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = blob_centers(&mut rng, spec.blobs, spec.dim, spec.separation);
    let layout = spec.stripe_layout();
    let stripe_w = side / layout.len() as f64;

    let mut labels = Vec::with_capacity(2 * spec.n_per_view);
    let mut stripes = Vec::with_capacity(2 * spec.n_per_view);
    let mut views = Vec::with_capacity(2);
    for geom in [&geom1, &geom2] {
        let pos = patch_positions(geom).coords;
        let mut data = Vec::with_capacity(spec.n_per_view * spec.dim);
        for row in pos.rows() {
            let stripe = ((row[0] / stripe_w) as usize).min(layout.len() - 1);
            let blob = layout[stripe];
            stripes.push(stripe);
            labels.push(blob);
            for c in centers.row(blob) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push((c + spec.sigma * noise) as f32);
            }
        }
        views.push(FeatureMatrix::from_shape_vec(spec.n_per_view, spec.dim, data)?);
    }
    let view2 = views.pop().expect("two views");
    let view1 = views.pop().expect("two views");
    let marginal = AttentionMarginal::uniform(2 * spec.n_per_view)?;
    let pair = ViewPair::assemble(&view1, &view2, marginal, &geom1, &geom2, &image)?;
    Ok(SynthPair {
        view1,
        view2,
        geom1,
        geom2,
        image,
        pair,
        labels,
        stripes,
    })
}
