//! Renders adaptive and fixed-kernel density maps for one annotation, checks their
//! mass and saves heatmaps.

use pandense::geometry::{generate_density_map, sum_pool_downsample, KernelPolicy, PointAnnotation};
use pandense::persist::heatmap;

fn main() -> pandense::Result<()> {
    let mut points = vec![[0.0, 0.0], [63.5, 10.0]];
    for i in 0..40 {
        let t = i as f64;
        points.push([20.0 + (t * 1.7) % 24.0, 30.0 + (t * 3.1) % 20.0]);
    }
    let ann = PointAnnotation::new(64, 64, points);
    for (name, policy) in [("adaptive", KernelPolicy::default()), ("fixed", KernelPolicy::fixed(2.0))] {
        let map = generate_density_map(&ann, &policy)?;
        let quarter = sum_pool_downsample(&map, 4)?;
        println!(
            "{name:>8}: P = {}, map sum {:.6}, 16x16 sum {:.6}",
            ann.count(),
            map.sum(),
            quarter.sum()
        );
        heatmap(&map).save(std::path::Path::new(&format!("density_{name}.png")))?;
    }
    Ok(())
}
