use pandense::geometry::{
    dense_degree, generate_density_map, knn_distances, sum_pool_downsample, KernelPolicy, Point, PointAnnotation,
};
use proptest::prelude::*;

fn brute_knn(points: &[Point], q: usize) -> Vec<Vec<f64>> {
    points
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
                .collect();
            d.sort_by(f64::total_cmp);
            d.truncate(q);
            d
        })
        .collect()
}

fn points(max: usize, side: f64) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((0.0..side, 0.0..side).prop_map(|(x, y)| [x, y]), 0..max)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a.is_infinite() && b.is_infinite()) || (a - b).abs() <= tol * a.abs().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_matches_all_pairs(pts in points(200, 100.0), q in 1usize..8) {
        prop_assert_eq!(knn_distances(&pts, q), brute_knn(&pts, q));
    }

    #[test]
    fn degree_rigid_motion_invariant(pts in points(40, 50.0), q in 1usize..6, dx in -100.0..100.0f64, dy in -100.0..100.0f64, theta in 0.0..std::f64::consts::TAU) {
        let d = dense_degree(&pts, q);
        let (s, c) = theta.sin_cos();
        let moved: Vec<Point> = pts.iter().map(|p| [c * p[0] - s * p[1] + dx, s * p[0] + c * p[1] + dy]).collect();
        prop_assert!(close(dense_degree(&moved, q), d, 1e-9));
    }

    #[test]
    fn degree_scales_linearly(pts in points(40, 50.0), q in 1usize..6, scale in 0.01..100.0f64) {
        let d = dense_degree(&pts, q);
        let scaled: Vec<Point> = pts.iter().map(|p| [p[0] * scale, p[1] * scale]).collect();
        prop_assert!(close(dense_degree(&scaled, q), scale * d, 1e-9));
    }

    #[test]
    fn density_mass_conserved(pts in points(200, 1.0), w in 1usize..80, h in 1usize..80, fixed in any::<bool>()) {
        let pts: Vec<Point> = pts.iter().map(|p| [p[0] * w as f64, p[1] * h as f64]).collect();
        let n = pts.len();
        let ann = PointAnnotation::new(w, h, pts);
        let policy = if fixed { KernelPolicy::fixed(4.0) } else { KernelPolicy::default() };
        let map = generate_density_map(&ann, &policy).unwrap();
        prop_assert!((map.sum() - n as f64).abs() <= 1e-6 * (n as f64).max(1.0));
    }

    #[test]
    fn sum_pool_keeps_count(pts in points(150, 64.0), factor in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let n = pts.len();
        let map = generate_density_map(&PointAnnotation::new(64, 64, pts), &KernelPolicy::default()).unwrap();
        let pooled = sum_pool_downsample(&map, factor).unwrap();
        prop_assert_eq!((pooled.height, pooled.width), (64 / factor, 64 / factor));
        prop_assert!((pooled.sum() - map.sum()).abs() <= 1e-5 * (n as f64).max(1.0));
    }
}

#[test]
fn degree_grows_with_grid_spacing() {
    let grid = |s: f64| -> Vec<Point> { (0..8).flat_map(|i| (0..8).map(move |j| [i as f64 * s, j as f64 * s])).collect() };
    let ds: Vec<f64> = [0.5, 1.0, 2.0, 3.5, 7.0].iter().map(|&s| dense_degree(&grid(s), 5)).collect();
    assert!(ds.windows(2).all(|w| w[1] > w[0]), "{ds:?}");
}

#[test]
fn border_heads_renormalized() {
    let ann = PointAnnotation::new(10, 10, vec![[0.0, 0.0], [9.99, 9.99], [0.0, 9.5], [5.0, 5.0]]);
    let map = generate_density_map(&ann, &KernelPolicy::fixed(6.0)).unwrap();
    assert!((map.sum() - 4.0).abs() < 1e-6);
}
