use rand::seq::IndexedRandom;
use rand::Rng;

use super::kmeans::DensityClustering;
use super::patches::{make_record, random_crop, PatchConfig, PatchRecord};
use crate::error::{invalid, Result};
use crate::geometry::Point;

/// A source image's head points in the resized frame, for drawing extra crops.
#[derive(Clone, Debug)]
pub struct CropSource {
    pub id: String,
    pub points: Vec<Point>,
}

pub const DEFAULT_BUDGET_FACTOR: usize = 50;

/// Tops every level up to the size of the largest.
///
/// Fresh random crops are drawn from `sources` and kept when their nearest centroid is
/// an under-filled level, for at most `budget_factor` draws per missing record. Any
/// remaining gap is closed by copying members of the short level with a random flip.
/// Records arrive with `level` set; the output keeps the input order and appends.
pub fn balance_clusters<R: Rng + ?Sized>(
    mut records: Vec<PatchRecord>,
    clustering: &DensityClustering,
    sources: &[CropSource],
    cfg: &PatchConfig,
    budget_factor: usize,
    rng: &mut R,
) -> Result<Vec<PatchRecord>> {
    let n = clustering.levels();
    let mut sizes = vec![0usize; n];
    for (i, r) in records.iter().enumerate() {
        match r.level {
            Some(l) if l < n => sizes[l] += 1,
            other => return invalid(format!("record {i} has level {other:?} outside 0..{n}")),
        }
    }
    let target = sizes.iter().copied().max().unwrap_or(0);
    let mut deficit: usize = sizes.iter().map(|&s| target - s).sum();
    if deficit == 0 {
        return Ok(records);
    }
    if sources.is_empty() && sizes.contains(&0) {
        return invalid("a density level is empty and there are no source images to crop from");
    }

    let mut draws = budget_factor * deficit;
    while deficit > 0 && draws > 0 && !sources.is_empty() {
        draws -= 1;
        let src = &sources[rng.random_range(0..sources.len())];
        let crop = random_crop(cfg, rng);
        let flipped = rng.random_bool(0.5);
        let mut rec = make_record(&src.id, &src.points, crop, flipped, cfg.q);
        let level = clustering.nearest_level(rec.dense_degree);
        if sizes[level] < target {
            rec.level = Some(level);
            records.push(rec);
            sizes[level] += 1;
            deficit -= 1;
        }
    }
    if deficit > 0 {
        log::info!("balancing: sampling budget exhausted, duplicating {deficit} records");
    }

    for level in 0..n {
        if sizes[level] == target {
            continue;
        }
        let members: Vec<usize> = (0..records.len()).filter(|&i| records[i].level == Some(level)).collect();
        if members.is_empty() {
            return invalid(format!("density level {level} stayed empty after {budget_factor}x sampling"));
        }
        while sizes[level] < target {
            let &i = members.choose(rng).expect("non-empty");
            let copy = records[i].with_flip(rng.random_bool(0.5));
            records.push(copy);
            sizes[level] += 1;
        }
    }
    Ok(records)
}
