use croc_core::features::FeatureMatrix;
use croc_core::segeval::{assignment_cost, evaluate_unsupervised, hungarian, kmeans, miou, EvalImage, LabelMask};
use croc_oracles::{brute_force_assignment, iou_by_counting, permutation_accuracy, Matrix};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn square(n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, n), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn hungarian_is_optimal(cost in (2usize..=6).prop_flat_map(square)) {
        let n = cost.len();
        let m = Array2::from_shape_fn((n, n), |(i, j)| cost[i][j]);
        let perm = hungarian(&m).unwrap();
        let mut seen = perm.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let got: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        prop_assert_eq!(got, assignment_cost(&m, &perm));
        prop_assert!((got - brute_force_assignment(&cost)).abs() <= 1e-9);
    }

    #[test]
    fn hungarian_exact_on_integers(cost in (2usize..=6).prop_flat_map(|n| {
        prop::collection::vec(prop::collection::vec((-50i32..50).prop_map(f64::from), n), n)
    })) {
        let n = cost.len();
        let m = Array2::from_shape_fn((n, n), |(i, j)| cost[i][j]);
        prop_assert_eq!(assignment_cost(&m, &hungarian(&m).unwrap()), brute_force_assignment(&cost));
    }

    #[test]
    fn miou_matches_counting(
        (pred, gt) in (prop::collection::vec(0u16..3, 64), prop::collection::vec(0u16..3, 64))
    ) {
        let report = miou(
            &LabelMask::new(8, 8, pred.clone()).unwrap(),
            &LabelMask::new(8, 8, gt.clone()).unwrap(),
            3,
        ).unwrap();
        let expected = iou_by_counting(&pred, &gt, 3);
        prop_assert_eq!(&report.per_class, &expected);
        let present: Vec<f64> = expected.iter().flatten().copied().collect();
        prop_assert!((report.mean - present.iter().sum::<f64>() / present.len() as f64).abs() <= 1e-15);
    }

    #[test]
    fn kmeans_inertia_never_rises(
        pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 4..40),
        k in 1usize..5,
        seed in any::<u64>(),
    ) {
        let x = Array2::from_shape_fn((pts.len(), 3), |(i, j)| pts[i][j]);
        let km = kmeans(&x, k.min(pts.len()), seed, 100).unwrap();
        for w in km.inertia_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0), "{:?}", km.inertia_trace);
        }
        prop_assert!(km.labels.iter().all(|&l| l < k.min(pts.len())));
        prop_assert_eq!(km, kmeans(&x, k.min(pts.len()), seed, 100).unwrap());
    }
}

#[test]
fn permuted_hungarian_over_many_shuffles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.0, 1.0).unwrap();
    for _ in 0..1000 {
        let n = 5;
        let cost: Matrix = (0..n)
            .map(|_| (0..n).map(|_| noise.sample(&mut rng)).collect())
            .collect();
        let m = Array2::from_shape_fn((n, n), |(i, j)| cost[i][j]);
        let best = brute_force_assignment(&cost);
        assert!((assignment_cost(&m, &hungarian(&m).unwrap()) - best).abs() <= 1e-9);
    }
}

#[test]
fn kmeans_recovers_separated_clusters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let truth: Vec<usize> = (0..120).map(|i| i % 3).collect();
    let x = Array2::from_shape_fn((120, 3), |(i, j)| {
        f64::from(u8::from(truth[i] == j)) + noise.sample(&mut rng)
    });
    let km = kmeans(&x, 3, 0, 300).unwrap();
    assert_eq!(permutation_accuracy(&km.labels, &truth, 3), 1.0);
}

#[test]
fn one_hot_features_evaluate_near_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let images: Vec<EvalImage> = (0..3)
        .map(|_| {
            let labels: Vec<u16> = (0..64).map(|i| ((i / 8 + i % 8) % 4) as u16).collect();
            let data: Vec<f32> = labels
                .iter()
                .flat_map(|&l| (0..4u16).map(move |c| f32::from(u8::from(l == c))))
                .map(|v| v + noise.sample(&mut rng) as f32)
                .collect();
            EvalImage::new(
                FeatureMatrix::from_shape_vec(64, 4, data).unwrap(),
                LabelMask::new(8, 8, labels).unwrap(),
            )
            .unwrap()
        })
        .collect();
    let report = evaluate_unsupervised(&images, 4, &[0, 1, 2, 3, 4]).unwrap();
    assert!(report.mean >= 0.99, "{report:?}");
    assert_eq!(report.per_seed.len(), 5);
}
