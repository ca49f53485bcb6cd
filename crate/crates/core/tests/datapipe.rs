use pandense::datapipe::{
    balance_clusters, cluster_density_levels, extract_patches, lloyd, parse_manifest, prepare_patches, quantile_midpoints,
    save_manifest, load_manifest, within_sse, CropSource, PatchConfig, SourceImage, DEFAULT_BUDGET_FACTOR,
};
use pandense::geometry::{dense_degree, PointAnnotation};
use pandense::raster::Raster;
use pandense::synth::{generate_dataset, Profile, SynthConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Minimum within-cluster SSE over every split of the sorted values into `k` runs.
fn best_threshold_sse(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let sse = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|x| (x - m).powi(2)).sum::<f64>()
    };
    fn rec(v: &[f64], k: usize, sse: &dyn Fn(&[f64]) -> f64) -> f64 {
        if k == 1 {
            return sse(v);
        }
        (1..=v.len() - (k - 1)).map(|cut| sse(&v[..cut]) + rec(&v[cut..], k - 1, sse)).fold(f64::INFINITY, f64::min)
    }
    rec(&v, k, &sse)
}

fn distinct(values: &[f64]) -> usize {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kmeans_matches_threshold_search(values in prop::collection::vec(0.0..100.0f64, 3..=20), k in 2usize..=3) {
        prop_assume!(distinct(&values) >= k);
        let c = cluster_density_levels(&values, k).unwrap();
        let got = within_sse(&values, &c.assignments, k);
        let best = best_threshold_sse(&values, k);
        prop_assert!((got - best).abs() <= 1e-9 * best.max(1.0), "got {got}, best {best}");
        prop_assert!(c.centroids.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn lloyd_sse_never_increases(values in prop::collection::vec(0.0..50.0f64, 4..60), k in 2usize..=4) {
        prop_assume!(distinct(&values) >= k);
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let mut cents = quantile_midpoints(&sorted, k);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let (next, labels, _) = lloyd(&values, &cents, 1);
            let sse = within_sse(&values, &labels, k);
            prop_assert!(sse <= last + 1e-9);
            last = sse;
            cents = next;
        }
        let (fixed, labels, _) = lloyd(&values, &cents, 300);
        let (_, again, iters) = lloyd(&values, &fixed, 300);
        prop_assert_eq!(labels, again);
        prop_assert!(iters <= 1);
    }
}

#[test]
fn clustering_examples() {
    let c = cluster_density_levels(&[1.0, 2.0, 10.0, 11.0], 2).unwrap();
    assert_eq!(c.assignments, vec![1, 1, 0, 0]);
    let one = cluster_density_levels(&[1.0, 2.0, 6.0], 1).unwrap();
    assert_eq!(one.centroids, vec![3.0]);
    let inf = cluster_density_levels(&[1.0, 2.0, f64::INFINITY, 10.0], 2).unwrap();
    assert_eq!(inf.assignments[2], 0);
    assert!(cluster_density_levels(&[1.0, 1.0, f64::INFINITY], 2).is_err());
}

fn synth_sources(profile: Profile, m: usize, seed: u64) -> Vec<SourceImage> {
    generate_dataset(profile, m, seed, &SynthConfig::default())
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, s)| SourceImage { id: format!("img_{i:04}"), image: s.image, annotation: s.annotation })
        .collect()
}

#[test]
fn patches_within_crop_and_deterministic() {
    let cfg = PatchConfig { resize_to: 128, q: 5 };
    let sources = synth_sources(Profile::Mixed, 4, 11);
    for s in &sources {
        let a = extract_patches(&s.id, &s.image, &s.annotation, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = extract_patches(&s.id, &s.image, &s.annotation, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 18);
        assert_eq!(a.iter().filter(|r| r.flipped).count(), 9);
        for r in &a {
            r.validate(cfg.resize_to).unwrap();
            assert_eq!(r.count, r.points.len());
            assert!(r.points.iter().all(|p| p[0] >= 0.0 && p[0] < r.crop.w as f64 && p[1] >= 0.0 && p[1] < r.crop.h as f64));
        }
        let quarters: usize = a[..4].iter().map(|r| r.count).sum();
        assert_eq!(quarters, s.annotation.count());
    }
}

#[test]
fn head_at_seam_lands_in_one_quarter() {
    let ann = PointAnnotation::new(64, 64, vec![[32.0, 32.0], [31.999, 5.0]]);
    let image = Raster::gray(64, 64, vec![0; 64 * 64]).unwrap();
    let cfg = PatchConfig { resize_to: 64, q: 2 };
    let r = extract_patches("x", &image, &ann, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let counts: Vec<usize> = r[..4].iter().map(|r| r.count).collect();
    assert_eq!(counts, vec![1, 0, 0, 1]);
    assert_eq!(r[3].points, vec![[0.0, 0.0]]);
}

#[test]
fn balancing_equalizes_and_respects_centroids() {
    let cfg = PatchConfig { resize_to: 128, q: 5 };
    let sources = synth_sources(Profile::Mixed, 12, 3);
    let m = prepare_patches(&sources, &cfg, 2, 9).unwrap();
    let sizes = m.level_sizes();
    assert_eq!(sizes[0], sizes[1]);
    let clustering = m.clustering();
    for p in &m.patches {
        assert_eq!(clustering.nearest_level(p.dense_degree), p.level.unwrap());
    }
    let again = prepare_patches(&sources, &cfg, 2, 9).unwrap();
    assert_eq!(serde_json::to_string(&m).unwrap(), serde_json::to_string(&again).unwrap());

    let unchanged = balance_clusters(
        m.patches.clone(),
        &clustering,
        &[] as &[CropSource],
        &cfg,
        DEFAULT_BUDGET_FACTOR,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    assert_eq!(unchanged, m.patches);
}

#[test]
fn levels_order_by_count() {
    let cfg = PatchConfig { resize_to: 128, q: 5 };
    let m = prepare_patches(&synth_sources(Profile::Mixed, 16, 21), &cfg, 3, 2).unwrap();
    let mean = |l: usize| {
        let c: Vec<f64> = m.patches.iter().filter(|p| p.level == Some(l)).map(|p| p.count as f64).collect();
        c.iter().sum::<f64>() / c.len() as f64
    };
    assert!(mean(0) <= mean(1) && mean(1) <= mean(2), "{} {} {}", mean(0), mean(1), mean(2));
}

#[test]
fn mixed_levels_track_generation_profile() {
    let cfg = SynthConfig::default();
    let scenes = generate_dataset(Profile::Mixed, 100, 17, &cfg).unwrap();
    let ds: Vec<f64> = scenes.iter().map(|s| s.annotation.dense_degree(5)).collect();
    let c = cluster_density_levels(&ds, 2).unwrap();
    let agree = scenes
        .iter()
        .zip(&c.assignments)
        .filter(|(s, &l)| (s.kind == Profile::Dense) == (l == 1))
        .count();
    assert!(agree >= 95, "purity {agree}/100");
}

#[test]
fn pan_images_denser_at_the_bottom() {
    let cfg = SynthConfig::default();
    for seed in 0..3 {
        let scenes = generate_dataset(Profile::Pan, 10, seed, &cfg).unwrap();
        let ordered = scenes
            .iter()
            .filter(|s| {
                let half = cfg.height as f64 / 2.0;
                let (top, bottom): (Vec<_>, Vec<_>) = s.annotation.points.iter().partition(|p| p[1] < half);
                dense_degree(&bottom, 5) < dense_degree(&top, 5)
            })
            .count();
        assert!(ordered >= 9, "seed {seed}: {ordered}/10");
    }
}

#[test]
fn manifest_round_trip_and_errors() {
    let cfg = PatchConfig { resize_to: 128, q: 5 };
    let m = prepare_patches(&synth_sources(Profile::Mixed, 6, 4), &cfg, 2, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    save_manifest(&m, &path).unwrap();
    assert_eq!(load_manifest(&path).unwrap(), m);

    let mut json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    json["patches"][3].as_object_mut().unwrap().remove("level");
    let err = parse_manifest(&json.to_string()).unwrap_err().to_string();
    assert!(err.contains("patch record 3") && err.contains("level"), "{err}");
    let err = parse_manifest("{\n  \"resize_to\": 128,\n  oops\n}").unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn large_manifest_loads_quickly() {
    let cfg = PatchConfig { resize_to: 128, q: 5 };
    let mut m = prepare_patches(&synth_sources(Profile::Mixed, 4, 8), &cfg, 2, 0).unwrap();
    let base = m.patches.clone();
    while m.patches.len() < 200 {
        m.patches.extend(base.iter().cloned());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_manifest(&m, &path).unwrap();
    let t = std::time::Instant::now();
    load_manifest(&path).unwrap();
    assert!(t.elapsed().as_secs_f64() < 1.0);
}
