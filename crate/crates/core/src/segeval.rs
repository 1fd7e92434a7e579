//! Unsupervised segmentation scoring: k-means over pooled patch features,
//! Hungarian matching of clusters to classes and mean IoU.

use std::thread;

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::features::FeatureMatrix;

/// Grid of integer class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err(format!("mask must be at least 1x1, got {height}x{width}")));
        }
        if labels.len() != height * width {
            return Err(shape_err(format!(
                "mask {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Errors if any id is `>= n_classes`.
    pub fn check_classes(&self, n_classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l as usize >= n_classes) {
            Some(i) => Err(Error::Input(format!(
                "label {} at position {i} is outside [0, {n_classes})",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }
}

/// Counts with ground truth along rows and prediction along columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn from_labels(gt: &[u16], pred: &[u16], n_classes: usize) -> Result<Self> {
        if gt.len() != pred.len() {
            return Err(shape_err(format!(
                "{} ground-truth labels, {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        let mut counts = Array2::zeros((n_classes, n_classes));
        for (&g, &p) in gt.iter().zip(pred) {
            let (g, p) = (g as usize, p as usize);
            if g >= n_classes || p >= n_classes {
                return Err(Error::Input(format!(
                    "label pair ({g}, {p}) is outside [0, {n_classes})"
                )));
            }
            counts[[g, p]] += 1;
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// IoU per class; `None` where the class is absent from both sides.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let n = self.counts.nrows();
        (0..n)
            .map(|c| {
                let inter = self.counts[[c, c]];
                let union = self.counts.row(c).sum() + self.counts.column(c).sum() - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect()
    }
}

/// Per-class IoU and their mean over classes present in `pred` or `gt`.
#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

fn mean_present(per_class: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

pub fn miou(pred: &LabelMask, gt: &LabelMask, n_classes: usize) -> Result<IouReport> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(shape_err(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let per_class = ConfusionMatrix::from_labels(&gt.labels, &pred.labels, n_classes)?.per_class_iou();
    let mean = mean_present(&per_class);
    Ok(IouReport { per_class, mean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    /// `k x d`.
    pub centroids: Array2<f64>,
    /// Inertia after every assignment step.
    pub inertia_trace: Vec<f64>,
}

impl KMeans {
    pub fn inertia(&self) -> f64 {
        *self.inertia_trace.last().expect("at least one assignment")
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus_seed(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let m = x.nrows();
    let mut chosen = vec![rng.random_range(0..m)];
    let mut d2: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if u < d {
                        break;
                    }
                    u -= d;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // every point coincides with a chosen one
            let free: Vec<usize> = (0..m).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, r) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, x.row(next)));
        }
    }
    chosen
}

/// Nearest centroid per point; ties keep the previous label, then prefer
/// the lower index.
fn assign(x: &Array2<f64>, centroids: &Array2<f64>, prev: Option<&[usize]>) -> (Vec<usize>, Vec<f64>) {
    x.rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.rows().into_iter().enumerate() {
                let d = sq_dist(r, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            if let Some(p) = prev {
                let d = sq_dist(r, centroids.row(p[i]));
                if d <= best.1 {
                    best = (p[i], d);
                }
            }
            best
        })
        .unzip()
}

/// Lloyd iterations from k-means++ seeding until the assignment stops
/// changing or `max_iter` updates have run. Empty clusters are reseeded at
/// the point farthest from its current centroid.
pub fn kmeans(x: &Array2<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let m = x.nrows();
    if k == 0 || k > m {
        return Err(Error::Config(format!("k = {k} must lie in [1, {m}]")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("k-means features must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = x.select(Axis(0), &plus_plus_seed(x, k, &mut rng));
    let (mut labels, mut dist) = assign(x, &centroids, None);
    let mut inertia_trace = vec![dist.iter().sum()];

    for _ in 0..max_iter {
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &x.row(i));
            counts[l] += 1;
        }
        let mut taken = Vec::new();
        for (j, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mean = &sums.row(j) / count as f64;
                centroids.row_mut(j).assign(&mean);
            } else {
                let far = (0..m)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("k <= m leaves a free point");
                taken.push(far);
                centroids.row_mut(j).assign(&x.row(far));
                labels[far] = j;
            }
        }
        let (next, next_dist) = assign(x, &centroids, Some(&labels));
        inertia_trace.push(next_dist.iter().sum());
        let done = next == labels && taken.is_empty();
        labels = next;
        dist = next_dist;
        if done {
            break;
        }
    }
    Ok(KMeans {
        labels,
        centroids,
        inertia_trace,
    })
}

/// Minimum-cost perfect matching on a square matrix: `result[row] = column`.
pub fn hungarian(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(shape_err(format!(
            "assignment cost must be square, got {:?}",
            cost.dim()
        )));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("assignment cost must be finite".into()));
    }
    // potentials u (rows) and v (columns), 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            result[row_of[j] - 1] = j - 1;
        }
    }
    Ok(result)
}

/// Sum of `cost[i, perm[i]]`.
pub fn assignment_cost(cost: &Array2<f64>, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum()
}

/// One image of an evaluation set: patch features and their labels.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub features: FeatureMatrix,
    pub mask: LabelMask,
}

impl EvalImage {
    pub fn new(features: FeatureMatrix, mask: LabelMask) -> Result<Self> {
        if features.rows() != mask.len() {
            return Err(shape_err(format!(
                "{} feature rows but the mask has {} positions",
                features.rows(),
                mask.len()
            )));
        }
        Ok(Self { features, mask })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean over seeds of each class IoU; `None` if the class never occurs.
    pub per_class: Vec<Option<f64>>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

pub const DEFAULT_SEEDS: usize = 5;
pub const KMEANS_MAX_ITER: usize = 300;

fn evaluate_seed(x: &Array2<f64>, gt: &[u16], n_classes: usize, seed: u64) -> Result<IouReport> {
    let km = kmeans(x, n_classes, seed, KMEANS_MAX_ITER)?;
    let clusters: Vec<u16> = km.labels.iter().map(|&l| l as u16).collect();
    let co = ConfusionMatrix::from_labels(gt, &clusters, n_classes)?;
    // rows: clusters, columns: classes
    let cost = co.counts().t().mapv(|c| -(c as f64));
    let class_of = hungarian(&cost)?;
    let pred: Vec<u16> = km.labels.iter().map(|&l| class_of[l] as u16).collect();
    let per_class = ConfusionMatrix::from_labels(gt, &pred, n_classes)?.per_class_iou();
    let mean = mean_present(&per_class);
    Ok(IouReport { per_class, mean })
}

/// k-means with `n_classes` clusters over the features of all images, then
/// Hungarian matching of clusters to classes and mIoU, once per seed (seeds
/// run concurrently).
pub fn evaluate_unsupervised(images: &[EvalImage], n_classes: usize, seeds: &[u64]) -> Result<EvalReport> {
    let first = images
        .first()
        .ok_or_else(|| Error::Input("evaluation needs at least one image".into()))?;
    if seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one seed".into()));
    }
    if n_classes == 0 || n_classes > u16::MAX as usize + 1 {
        return Err(Error::Config(format!("invalid class count {n_classes}")));
    }
    let d = first.features.cols();
    if let Some((i, img)) = images.iter().enumerate().find(|(_, im)| im.features.cols() != d) {
        return Err(shape_err(format!(
            "image {i} has feature dimension {}, image 0 has {d}",
            img.features.cols()
        )));
    }
    for img in images {
        img.mask.check_classes(n_classes)?;
    }
    let views: Vec<_> = images.iter().map(|im| im.features.view()).collect();
    let x = ndarray::concatenate(Axis(0), &views)
        .map_err(|e| shape_err(e.to_string()))?
        .mapv(f64::from);
    let gt: Vec<u16> = images.iter().flat_map(|im| im.mask.labels().iter().copied()).collect();

    let reports: Vec<IouReport> = thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&s| {
                let (x, gt) = (&x, &gt);
                scope.spawn(move || evaluate_seed(x, gt, n_classes, s))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;

    let per_class = (0..n_classes)
        .map(|c| {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.per_class[c]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let per_seed: Vec<f64> = reports.iter().map(|r| r.mean).collect();
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    Ok(EvalReport {
        per_class,
        per_seed,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn mask(h: usize, w: usize, l: &[u16]) -> LabelMask {
        LabelMask::new(h, w, l.to_vec()).unwrap()
    }

    #[test]
    fn miou_identical_and_disjoint() {
        let a = mask(2, 2, &[0, 1, 1, 2]);
        assert_eq!(miou(&a, &a, 4).unwrap().mean, 1.0);
        let r = miou(&a, &a, 4).unwrap();
        assert_eq!(r.per_class[3], None);
        let p = mask(1, 2, &[0, 0]);
        let g = mask(1, 2, &[1, 1]);
        assert_eq!(miou(&p, &g, 2).unwrap().mean, 0.0);
        assert!(miou(&p, &a, 4).is_err());
        assert!(miou(&mask(1, 1, &[5]), &mask(1, 1, &[0]), 2).is_err());
    }

    #[test]
    fn miou_partial_overlap() {
        let p = mask(1, 4, &[0, 0, 1, 1]);
        let g = mask(1, 4, &[0, 1, 1, 1]);
        let r = miou(&p, &g, 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
    }

    #[test]
    fn hungarian_examples() {
        assert_eq!(hungarian(&array![[1.0, 0.0], [0.0, 1.0]]).unwrap(), vec![1, 0]);
        let c = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 0.0 } else { 1.0 });
        assert_eq!(hungarian(&c).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(hungarian(&Array2::zeros((0, 0))).unwrap(), Vec::<usize>::new());
        assert!(hungarian(&Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn hungarian_handles_negative_costs() {
        let c = array![[-5.0, -1.0, -2.0], [-4.0, -8.0, -1.0], [-3.0, -2.0, -9.0]];
        let p = hungarian(&c).unwrap();
        assert_eq!(p, vec![0, 1, 2]);
        assert_eq!(assignment_cost(&c, &p), -22.0);
    }

    #[test]
    fn kmeans_distinct_points_each_own_cluster() {
        let x = array![[0.0, 0.0], [1.0, 5.0], [-3.0, 2.0]];
        let km = kmeans(&x, 3, 1, 10).unwrap();
        let mut l = km.labels.clone();
        l.sort();
        assert_eq!(l, vec![0, 1, 2]);
        assert_eq!(km.inertia(), 0.0);
        assert!(kmeans(&x, 4, 1, 10).is_err());
        assert!(kmeans(&x, 0, 1, 10).is_err());
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array2::from_shape_fn((40, 2), |(i, c)| {
            let center = if c == 0 {
                if i < 20 {
                    -10.0
                } else {
                    10.0
                }
            } else {
                0.0
            };
            let e: f64 = StandardNormal.sample(&mut rng);
            center + 0.1 * e
        });
        for seed in 0..5 {
            let km = kmeans(&x, 2, seed, 100).unwrap();
            assert!(km.labels[..20].iter().all(|&l| l == km.labels[0]));
            assert!(km.labels[20..].iter().all(|&l| l == km.labels[20]));
            assert_ne!(km.labels[0], km.labels[20]);
            for w in km.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9);
            }
        }
    }

    #[test]
    fn kmeans_with_duplicate_points() {
        let x = array![[1.0], [1.0], [1.0], [2.0]];
        let km = kmeans(&x, 3, 0, 20).unwrap();
        let mut used = km.labels.clone();
        used.sort();
        used.dedup();
        assert_eq!(used.len(), 3);
        let same = kmeans(&x, 3, 0, 20).unwrap();
        assert_eq!(km, same);
    }

    #[test]
    fn single_class_dataset_scores_one() {
        let f = FeatureMatrix::new(array![[1.0f32, 0.0], [1.1, 0.1], [0.9, 0.0]]).unwrap();
        let img = EvalImage::new(f, mask(1, 3, &[0, 0, 0])).unwrap();
        let r = evaluate_unsupervised(&[img], 1, &[0, 1]).unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.per_seed, vec![1.0, 1.0]);
    }

    #[test]
    fn evaluation_rejects_bad_inputs() {
        let f = FeatureMatrix::new(array![[1.0f32], [2.0]]).unwrap();
        assert!(EvalImage::new(f.clone(), mask(1, 1, &[0])).is_err());
        let img = EvalImage::new(f, mask(1, 2, &[0, 3])).unwrap();
        assert!(evaluate_unsupervised(std::slice::from_ref(&img), 2, &[0]).is_err());
        assert!(evaluate_unsupervised(&[img], 4, &[]).is_err());
        assert!(evaluate_unsupervised(&[], 2, &[0]).is_err());
    }
}
