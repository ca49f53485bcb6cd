//! Patch-level MAE/RMSE: an exact global count can hide large local errors.

use pandense::geometry::DensityMap;
use pandense::metrics::{pmae_prmse, EvalReport};

fn quadrants(counts: [f32; 4]) -> DensityMap {
    let mut v = vec![0.0; 16];
    for (q, &c) in counts.iter().enumerate() {
        let (r0, c0) = (2 * (q / 2), 2 * (q % 2));
        for r in r0..r0 + 2 {
            for col in c0..c0 + 2 {
                v[r * 4 + col] = c / 4.0;
            }
        }
    }
    DensityMap::new(4, 4, v).expect("4x4")
}

fn main() -> pandense::Result<()> {
    let est = quadrants([10.0, 0.0, 2.0, 0.0]);
    let gt = quadrants([0.0, 10.0, 0.0, 2.0]);
    for n in [1, 4, 16] {
        let (pmae, prmse) = pmae_prmse(&[&est], &[&gt], n)?;
        println!("n = {n:>2}: PMAE {pmae:.2} PRMSE {prmse:.2}");
    }
    let report = EvalReport::from_maps(&[&est], &[&gt], &[1, 4, 16])?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(())
}
