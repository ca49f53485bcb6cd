use pandense::geometry::DensityMap;
use pandense::metrics::{mae_rmse, pmae_prmse, split_grid, EvalReport};
use proptest::prelude::*;

fn map(h: usize, w: usize) -> impl Strategy<Value = DensityMap> {
    prop::collection::vec(0.0f32..2.0, h * w).prop_map(move |v| DensityMap::new(h, w, v).unwrap())
}

fn pairs() -> impl Strategy<Value = (Vec<DensityMap>, Vec<DensityMap>)> {
    (4usize..20, 4usize..20, 1usize..6).prop_flat_map(|(h, w, m)| {
        (prop::collection::vec(map(h, w), m), prop::collection::vec(map(h, w), m))
    })
}

fn refs(v: &[DensityMap]) -> Vec<&DensityMap> {
    v.iter().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn single_region_is_the_global_metric((est, gt) in pairs()) {
        let counts = |v: &[DensityMap]| v.iter().map(DensityMap::sum).collect::<Vec<_>>();
        let global = mae_rmse(&counts(&est), &counts(&gt)).unwrap();
        prop_assert_eq!(pmae_prmse(&refs(&est), &refs(&gt), 1).unwrap(), global);
        let r = EvalReport::from_maps(&refs(&est), &refs(&gt), &[1]).unwrap();
        prop_assert_eq!((r.pmae[&1], r.prmse[&1]), (r.mae, r.rmse));
    }

    #[test]
    fn prmse_bounds_pmae((est, gt) in pairs(), n in prop::sample::select(vec![1usize, 4, 9, 16])) {
        let (pmae, prmse) = pmae_prmse(&refs(&est), &refs(&gt), n).unwrap();
        prop_assert!(prmse >= pmae - 1e-12);
    }

    #[test]
    fn grid_tiles_the_map(m in (4usize..30, 4usize..30).prop_flat_map(|(h, w)| map(h, w)), n in prop::sample::select(vec![1usize, 4, 9, 16])) {
        let parts = split_grid(&m, n).unwrap();
        prop_assert_eq!(parts.len(), n);
        let k = (n as f64).sqrt() as usize;
        let rows: usize = parts.iter().step_by(k).map(|p| p.height).sum();
        let cols: usize = parts[..k].iter().map(|p| p.width).sum();
        prop_assert_eq!((rows, cols), (m.height, m.width));
        let area: usize = parts.iter().map(|p| p.height * p.width).sum();
        prop_assert_eq!(area, m.height * m.width);
        let total: f64 = parts.iter().map(DensityMap::sum).sum();
        prop_assert!((total - m.sum()).abs() < 1e-9 * m.sum().max(1.0));
    }
}

#[test]
fn global_count_hides_local_error() {
    let est = DensityMap::new(4, 4, vec![1.0; 16]).unwrap();
    let mut gt = DensityMap::zeros(4, 4);
    for i in [0, 1, 4, 5] {
        gt.values[i] = 4.0;
    }
    assert_eq!(pmae_prmse(&[&est], &[&gt], 1).unwrap().0, 0.0);
    // quadrants of est hold 4 each; gt holds 16, 0, 0, 0
    assert_eq!(pmae_prmse(&[&est], &[&gt], 4).unwrap().0, (12.0 + 4.0 + 4.0 + 4.0) / 4.0);
}
