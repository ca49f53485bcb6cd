//! Patch extraction, density-level clustering, balancing and the dataset manifest.

mod balance;
mod kmeans;
mod patches;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use balance::{balance_clusters, CropSource, DEFAULT_BUDGET_FACTOR};
pub use kmeans::{cluster_density_levels, lloyd, quantile_midpoints, within_sse, DensityClustering, MAX_LLOYD_ITERS};
pub use patches::{
    extract_patches, make_record, random_crop, render_patch, scale_points, Crop, PatchConfig, PatchRecord,
    CROPS_PER_IMAGE,
};

use crate::error::{invalid, io_err, Error, Result};
use crate::geometry::PointAnnotation;
use crate::raster::Raster;

/// Everything `prepare` produces. JSON keys: `resize_to`, `Q`, `N`, `centroids`,
/// `patches`, plus the optional `data_dir` the patches were cut from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub resize_to: usize,
    #[serde(rename = "Q")]
    pub q: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub centroids: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<String>,
    pub patches: Vec<PatchRecord>,
}

impl Manifest {
    pub fn clustering(&self) -> DensityClustering {
        DensityClustering {
            centroids: self.centroids.clone(),
            assignments: self.patches.iter().map(|p| p.level.unwrap_or(0)).collect(),
        }
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n];
        for p in &self.patches {
            if let Some(l) = p.level {
                sizes[l] += 1;
            }
        }
        sizes
    }

    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig { resize_to: self.resize_to, q: self.q }
    }
}

/// One annotated source image.
#[derive(Clone, Debug)]
pub struct SourceImage {
    pub id: String,
    pub image: Raster,
    pub annotation: PointAnnotation,
}

/// Extracts patches from every source, clusters them into `n` levels by dense degree
/// and balances the levels. Deterministic in `seed`.
pub fn prepare_patches(sources: &[SourceImage], cfg: &PatchConfig, n: usize, seed: u64) -> Result<Manifest> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(sources.len() * 2 * CROPS_PER_IMAGE);
    for s in sources {
        records.extend(extract_patches(&s.id, &s.image, &s.annotation, cfg, &mut rng)?);
    }
    let ds: Vec<f64> = records.iter().map(|r| r.dense_degree).collect();
    let clustering = cluster_density_levels(&ds, n)?;
    for (r, &l) in records.iter_mut().zip(&clustering.assignments) {
        r.level = Some(l);
    }
    let crop_sources: Vec<CropSource> = sources
        .iter()
        .map(|s| CropSource { id: s.id.clone(), points: scale_points(&s.annotation, cfg.resize_to) })
        .collect();
    let patches = balance_clusters(records, &clustering, &crop_sources, cfg, DEFAULT_BUDGET_FACTOR, &mut rng)?;
    Ok(Manifest { resize_to: cfg.resize_to, q: cfg.q, n, centroids: clustering.centroids, data_dir: None, patches })
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    std::fs::write(path, json + "\n").map_err(io_err(path))
}

fn parse_err(path: &Path, message: String) -> Error {
    Error::Parse { path: path.to_path_buf(), message }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_manifest(&text).map_err(|e| match e {
        Error::Invalid(message) => parse_err(path, message),
        other => other,
    })
}

/// Parses manifest JSON. Errors carry the line and column of malformed JSON, or the
/// index of the offending patch record.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut root: Value =
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("malformed manifest: {e}")))?;
    let Some(obj) = root.as_object_mut() else {
        return invalid("manifest must be a JSON object");
    };
    let Some(Value::Array(raw)) = obj.remove("patches") else {
        return invalid("manifest has no \"patches\" array");
    };
    let mut patches = Vec::with_capacity(raw.len());
    for (i, p) in raw.into_iter().enumerate() {
        if p.get("level").is_none() {
            return invalid(format!("patch record {i}: missing field \"level\""));
        }
        let rec: PatchRecord =
            serde_json::from_value(p).map_err(|e| Error::Invalid(format!("patch record {i}: {e}")))?;
        patches.push(rec);
    }
    obj.insert("patches".into(), Value::Array(Vec::new()));
    let mut m: Manifest = serde_json::from_value(root).map_err(|e| Error::Invalid(format!("manifest: {e}")))?;
    m.patches = patches;
    if m.centroids.len() != m.n {
        return invalid(format!("{} centroids for N = {}", m.centroids.len(), m.n));
    }
    for (i, p) in m.patches.iter().enumerate() {
        if p.level.is_some_and(|l| l >= m.n) {
            return invalid(format!("patch record {i}: level {:?} outside 0..{}", p.level, m.n));
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ann = PointAnnotation::new(40, 40, (0..30).map(|i| [(i * 7 % 40) as f64 + 0.3, (i * 13 % 40) as f64]).collect());
        let img = Raster::gray(40, 40, vec![9; 1600]).unwrap();
        let cfg = PatchConfig { resize_to: 40, q: 2 };
        let mut patches = extract_patches("s0", &img, &ann, &cfg, &mut rng).unwrap();
        for (i, p) in patches.iter_mut().enumerate() {
            p.level = Some(i % 2);
        }
        Manifest { resize_to: 40, q: 2, n: 2, centroids: vec![0.1 + 0.2, 1.0 / 3.0], data_dir: None, patches }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_manifest(&m, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }

    #[test]
    fn missing_level_names_record() {
        let m = sample();
        let mut v = serde_json::to_value(&m).unwrap();
        v["patches"][7].as_object_mut().unwrap().remove("level");
        let err = parse_manifest(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("patch record 7") && err.contains("level"), "{err}");
    }

    #[test]
    fn malformed_json_reports_line() {
        let err = parse_manifest("{\n  \"resize_to\": 4,\n  oops\n}").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
