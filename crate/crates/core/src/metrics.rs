//! Whole-image and grid-region count errors.

use std::collections::BTreeMap;
use std::path::Path;

use pandense_tensor::ops::band_start;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::geometry::DensityMap;

pub const DEFAULT_N_VALUES: [usize; 4] = [1, 4, 9, 16];

pub fn count_from_map(map: &DensityMap) -> f64 {
    map.sum()
}

/// Mean absolute and root-mean-square count error.
pub fn mae_rmse(est: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    if est.is_empty() || est.len() != gt.len() {
        return invalid(format!("mae/rmse need equal non-empty lists, got {} and {}", est.len(), gt.len()));
    }
    let m = est.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (e, g) in est.iter().zip(gt) {
        let d = e - g;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / m, (sq / m).sqrt()))
}

fn grid_side(n: usize) -> Result<usize> {
    let s = (n as f64).sqrt().round() as usize;
    if n == 0 || s * s != n {
        return invalid(format!("n = {n} is not a positive perfect square"));
    }
    Ok(s)
}

/// Splits `map` into a `sqrt(n) x sqrt(n)` grid of near-equal bands, row-major.
/// Band `b` of an extent `L` starts at `floor(b L / sqrt(n))`.
pub fn split_grid(map: &DensityMap, n: usize) -> Result<Vec<DensityMap>> {
    let s = grid_side(n)?;
    if s > map.height || s > map.width {
        return invalid(format!("a {s}x{s} grid does not fit a {}x{} map", map.height, map.width));
    }
    let mut out = Vec::with_capacity(n);
    for br in 0..s {
        let (r0, r1) = (band_start(br, map.height, s), band_start(br + 1, map.height, s));
        for bc in 0..s {
            let (c0, c1) = (band_start(bc, map.width, s), band_start(bc + 1, map.width, s));
            let mut values = Vec::with_capacity((r1 - r0) * (c1 - c0));
            for r in r0..r1 {
                values.extend_from_slice(&map.values[r * map.width + c0..r * map.width + c1]);
            }
            out.push(DensityMap { height: r1 - r0, width: c1 - c0, values });
        }
    }
    Ok(out)
}

/// Region counts of every map in grid order, flattened image-major.
fn region_counts(maps: &[&DensityMap], n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(maps.len() * n);
    for m in maps {
        out.extend(split_grid(m, n)?.iter().map(count_from_map));
    }
    Ok(out)
}

/// MAE and RMSE over the `n * M` region-count pairs of an `n`-way grid split.
pub fn pmae_prmse(est: &[&DensityMap], gt: &[&DensityMap], n: usize) -> Result<(f64, f64)> {
    if est.len() != gt.len() {
        return invalid(format!("{} estimated maps for {} ground-truth maps", est.len(), gt.len()));
    }
    for (i, (e, g)) in est.iter().zip(gt).enumerate() {
        if (e.height, e.width) != (g.height, g.width) {
            return invalid(format!(
                "pair {i}: estimate is {}x{} but ground truth is {}x{}",
                e.height, e.width, g.height, g.width
            ));
        }
    }
    mae_rmse(&region_counts(est, n)?, &region_counts(gt, n)?)
}

/// Counts of one evaluated image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountPair {
    pub estimate: f64,
    pub ground_truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "M")]
    pub m: usize,
    pub counts: Vec<CountPair>,
    pub mae: f64,
    pub rmse: f64,
    pub n_values: Vec<usize>,
    pub pmae: BTreeMap<usize, f64>,
    pub prmse: BTreeMap<usize, f64>,
}

impl EvalReport {
    pub fn from_maps(est: &[&DensityMap], gt: &[&DensityMap], n_values: &[usize]) -> Result<Self> {
        let e: Vec<f64> = est.iter().map(|m| count_from_map(m)).collect();
        let g: Vec<f64> = gt.iter().map(|m| count_from_map(m)).collect();
        let (mae, rmse) = mae_rmse(&e, &g)?;
        let (mut pmae, mut prmse) = (BTreeMap::new(), BTreeMap::new());
        for &n in n_values {
            let (a, b) = pmae_prmse(est, gt, n)?;
            pmae.insert(n, a);
            prmse.insert(n, b);
        }
        let counts = e.iter().zip(&g).map(|(&estimate, &ground_truth)| CountPair { estimate, ground_truth }).collect();
        Ok(Self { m: est.len(), counts, mae, rmse, n_values: n_values.to_vec(), pmae, prmse })
    }

    pub fn mean_ground_truth(&self) -> f64 {
        self.counts.iter().map(|c| c.ground_truth).sum::<f64>() / self.m.max(1) as f64
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(path, json + "\n").map_err(io_err(path))
    }

    /// One row per grid size: `n,PMAE,PRMSE`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["n", "PMAE", "PRMSE"]).map_err(csv_err)?;
        for n in &self.n_values {
            w.write_record([n.to_string(), self.pmae[n].to_string(), self.prmse[n].to_string()]).map_err(csv_err)?;
        }
        w.flush().map_err(io_err(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_formula() {
        assert_eq!(mae_rmse(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), (0.0, 0.0));
        let (mae, rmse) = mae_rmse(&[10.0, 20.0], &[12.0, 16.0]).unwrap();
        assert_eq!(mae, 3.0);
        assert!((rmse - 10f64.sqrt()).abs() < 1e-12);
        assert!(mae_rmse(&[], &[]).is_err());
    }

    #[test]
    fn grid_shapes() {
        let map = DensityMap::new(4, 4, (0..16).map(|v| v as f32).collect()).unwrap();
        assert_eq!(split_grid(&map, 1).unwrap(), vec![map.clone()]);
        let q = split_grid(&map, 4).unwrap();
        assert_eq!(q[1].values, vec![2.0, 3.0, 6.0, 7.0]);
        assert!(split_grid(&map, 3).is_err());
        let ten = DensityMap::new(10, 10, vec![1.0; 100]).unwrap();
        let heights: Vec<usize> = split_grid(&ten, 9).unwrap().iter().step_by(3).map(|m| m.height).collect();
        assert_eq!(heights, vec![3, 3, 4]);
    }

    #[test]
    fn quadrant_counterexample() {
        let est = DensityMap::new(4, 4, vec![1.0; 16]).unwrap();
        let mut gt = DensityMap::zeros(4, 4);
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            gt.values[r * 4 + c] = 4.0;
        }
        let (pmae, _) = pmae_prmse(&[&est], &[&gt], 4).unwrap();
        assert_eq!(pmae, 6.0);
        let (mae, _) = pmae_prmse(&[&est], &[&gt], 1).unwrap();
        assert_eq!(mae, 0.0);
    }

    #[test]
    fn report_degenerates_at_one() {
        let a = DensityMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = DensityMap::new(2, 2, vec![0.5, 2.0, 3.0, 1.0]).unwrap();
        let r = EvalReport::from_maps(&[&a, &b], &[&b, &a], &[1, 4]).unwrap();
        assert_eq!(r.pmae[&1], r.mae);
        assert_eq!(r.prmse[&1], r.rmse);
        let dir = tempfile::tempdir().unwrap();
        r.save_csv(&dir.path().join("r.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(text.starts_with("n,PMAE,PRMSE\n1,"));
    }
}
