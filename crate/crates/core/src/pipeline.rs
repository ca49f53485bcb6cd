//! Directory-level glue between datasets, training and evaluation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use pandense_tensor::Tensor;

use crate::config::RunConfig;
use crate::datapipe::{prepare_patches, save_manifest, Manifest, PatchConfig, SourceImage};
use crate::error::{invalid, io_err, Error, Result};
use crate::geometry::{generate_density_map, sum_pool_downsample, DensityMap, KernelPolicy, PointAnnotation};
use crate::metrics::EvalReport;
use crate::model::PaDNet;
use crate::persist::write_dmap;
use crate::raster::Raster;
use crate::training::{build_samples, Sample};

/// Reads every `*.json` annotation in `dir` (sorted by name) and the image it names.
/// A source's id is its annotation file stem.
pub fn load_annotated_dir(dir: &Path, channels: usize) -> Result<Vec<SourceImage>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return invalid(format!("{}: no annotation files", dir.display()));
    }
    files
        .iter()
        .map(|path| {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            let annotation: PointAnnotation =
                serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.clone(), message: e.to_string() })?;
            annotation.validate().map_err(|e| Error::Parse { path: path.clone(), message: e.to_string() })?;
            let image = Raster::load(&dir.join(&annotation.image), channels)?;
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Ok(SourceImage { id, image, annotation })
        })
        .collect()
}

pub fn patch_config(cfg: &RunConfig) -> PatchConfig {
    PatchConfig { resize_to: cfg.data.resize_to, q: cfg.data.q }
}

/// Extracts, clusters and balances the patches of `data_dir`.
pub fn prepare_dir(data_dir: &Path, cfg: &RunConfig, seed: u64) -> Result<(Manifest, Vec<SourceImage>)> {
    let sources = load_annotated_dir(data_dir, cfg.model.input_channels)?;
    let mut manifest = prepare_patches(&sources, &patch_config(cfg), cfg.model.levels, seed)?;
    manifest.data_dir = Some(data_dir.to_string_lossy().into_owned());
    Ok((manifest, sources))
}

/// Writes `manifest.json` plus one ground-truth DMAP per patch (`gt/NNNNN.dmap`) at the
/// model's output resolution.
pub fn write_prepared(out_dir: &Path, manifest: &Manifest, samples: &[Sample]) -> Result<PathBuf> {
    let gt_dir = out_dir.join("gt");
    std::fs::create_dir_all(&gt_dir).map_err(io_err(&gt_dir))?;
    let path = out_dir.join("manifest.json");
    save_manifest(manifest, &path)?;
    for (i, s) in samples.iter().enumerate() {
        write_dmap(&gt_dir.join(format!("{i:05}.dmap")), &s.target)?;
    }
    Ok(path)
}

/// Training samples for every manifest patch.
pub fn samples_for(manifest: &Manifest, sources: &[SourceImage], policy: &KernelPolicy, factor: usize) -> Result<Vec<Sample>> {
    let by_id: HashMap<&str, &Raster> = sources.iter().map(|s| (s.id.as_str(), &s.image)).collect();
    build_samples(manifest, |id| by_id.get(id).copied(), policy, factor)
}

/// Mirror index into `0..len` (edge pixel not repeated).
fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len { m } else { period - m }
}

/// Planar `[C, H, W]` pixels reflect-padded on the bottom and right to multiples of `m`.
pub fn reflect_pad(planar: &[f32], c: usize, h: usize, w: usize, m: usize) -> (Vec<f32>, usize, usize) {
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let mut out = Vec::with_capacity(c * hp * wp);
    for ch in 0..c {
        for y in 0..hp {
            let sy = reflect(y, h);
            for x in 0..wp {
                out.push(planar[(ch * h + sy) * w + reflect(x, w)]);
            }
        }
    }
    (out, hp, wp)
}

/// The model's map for a whole image of any size. Inputs are reflect-padded up to the
/// front-end's stride; the output grid is `ceil(H/d) x ceil(W/d)`.
pub fn predict_map(model: &mut PaDNet<f32>, image: &Raster) -> Result<DensityMap> {
    let d = model.spec().downsample();
    if image.channels != model.spec().input_channels {
        return invalid(format!("image has {} channels, model expects {}", image.channels, model.spec().input_channels));
    }
    let (padded, hp, wp) = reflect_pad(&image.to_planar(), image.channels, image.height, image.width, d);
    let x = Tensor::new(&[1, image.channels, hp, wp], padded)?;
    let y = model.predict(&x)?;
    DensityMap::new(hp / d, wp / d, y.into_data())
}

/// Ground truth on the same grid as [`predict_map`].
pub fn ground_truth_map(ann: &PointAnnotation, policy: &KernelPolicy, factor: usize) -> Result<DensityMap> {
    sum_pool_downsample(&generate_density_map(ann, policy)?.pad_to_multiple(factor), factor)
}

/// Whole-image evaluation with every grid size in `n_values`.
pub fn evaluate_sources(
    model: &mut PaDNet<f32>,
    sources: &[SourceImage],
    policy: &KernelPolicy,
    n_values: &[usize],
) -> Result<EvalReport> {
    let d = model.spec().downsample();
    let mut est = Vec::with_capacity(sources.len());
    let mut gt = Vec::with_capacity(sources.len());
    for s in sources {
        est.push(predict_map(model, &s.image)?);
        gt.push(ground_truth_map(&s.annotation, policy, d)?);
    }
    let est_refs: Vec<&DensityMap> = est.iter().collect();
    let gt_refs: Vec<&DensityMap> = gt.iter().collect();
    EvalReport::from_maps(&est_refs, &gt_refs, n_values)
}
