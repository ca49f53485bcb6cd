//! Seeded synthetic crowd scenes: bright head blobs on a noisy background, with
//! exact head annotations.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::geometry::{knn_distances, Point, PointAnnotation};
use crate::raster::Raster;

pub const MIN_SEPARATION: f64 = 1.0;
pub const PLACEMENT_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn contains(&self, p: &Point) -> bool {
        p[0] >= self.x0 && p[0] < self.x0 + self.w && p[1] >= self.y0 && p[1] < self.y0 + self.h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Uniform,
    /// Normal around `center` with standard deviation `spread`, re-drawn until inside the rect.
    GaussianCluster { center: Point, spread: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub rect: Rect,
    pub count: usize,
    pub placement: Placement,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRender {
    /// Blob radius as a fraction of the mean distance to the 3 nearest heads.
    pub radius_factor: f64,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Peak brightness added at a head centre.
    pub intensity: f64,
}

impl Default for HeadRender {
    fn default() -> Self {
        Self { radius_factor: 0.3, min_radius: 1.0, max_radius: 5.0, intensity: 180.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub regions: Vec<Region>,
    pub head: HeadRender,
    pub background: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn total_count(&self) -> usize {
        self.regions.iter().map(|r| r.count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return invalid("scene must have positive size");
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for (i, r) in self.regions.iter().enumerate() {
            let q = r.rect;
            if q.x0 < 0.0 || q.y0 < 0.0 || q.w <= 0.0 || q.h <= 0.0 || q.x0 + q.w > w || q.y0 + q.h > h {
                return invalid(format!("region {i} rect {q:?} outside the {w}x{h} scene"));
            }
            if let Placement::GaussianCluster { spread, .. } = r.placement {
                if !(spread > 0.0) {
                    return invalid(format!("region {i}: cluster spread must be positive"));
                }
            }
        }
        if !(self.noise_std >= 0.0) {
            return invalid("noise_std must be non-negative");
        }
        Ok(())
    }
}

fn sample_in<R: Rng + ?Sized>(region: &Region, rng: &mut R) -> Point {
    let r = region.rect;
    match region.placement {
        Placement::Uniform => [r.x0 + rng.random::<f64>() * r.w, r.y0 + rng.random::<f64>() * r.h],
        Placement::GaussianCluster { center, spread } => {
            let n = Normal::new(0.0, spread).expect("positive spread");
            loop {
                let p = [center[0] + n.sample(rng), center[1] + n.sample(rng)];
                if r.contains(&p) {
                    return p;
                }
            }
        }
    }
}

/// Samples heads region by region and renders them. Fails when a head cannot be
/// placed at least one pixel from all others within 100 draws.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Raster, PointAnnotation)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut points: Vec<Point> = Vec::with_capacity(spec.total_count());
    for (ri, region) in spec.regions.iter().enumerate() {
        for k in 0..region.count {
            let mut placed = false;
            for _ in 0..PLACEMENT_RETRIES {
                let p = sample_in(region, &mut rng);
                let clear = points.iter().all(|q| (p[0] - q[0]).hypot(p[1] - q[1]) >= MIN_SEPARATION);
                if clear {
                    points.push(p);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return invalid(format!(
                    "region {ri}: head {k} of {} cannot keep {MIN_SEPARATION}px separation after {PLACEMENT_RETRIES} draws",
                    region.count
                ));
            }
        }
    }
    let image = render(spec, &points, &mut rng);
    Ok((image, PointAnnotation::new(spec.width, spec.height, points)))
}

fn render<R: Rng + ?Sized>(spec: &SceneSpec, points: &[Point], rng: &mut R) -> Raster {
    let (w, h) = (spec.width, spec.height);
    let mut acc = vec![spec.background; w * h];
    let hr = spec.head;
    let radii: Vec<f64> = if points.len() < 2 {
        vec![hr.max_radius; points.len()]
    } else {
        knn_distances(points, 3)
            .iter()
            .map(|d| (hr.radius_factor * d.iter().sum::<f64>() / d.len() as f64).clamp(hr.min_radius, hr.max_radius))
            .collect()
    };
    for (p, &radius) in points.iter().zip(&radii) {
        let s = radius / 2.0;
        let reach = (2.0 * radius).ceil() as isize;
        let (cx, cy) = (p[0].floor() as isize, p[1].floor() as isize);
        for y in (cy - reach).max(0)..=(cy + reach).min(h as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(w as isize - 1) {
                let dx = x as f64 + 0.5 - p[0];
                let dy = y as f64 + 0.5 - p[1];
                acc[y as usize * w + x as usize] += hr.intensity * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let data = acc
        .into_iter()
        .map(|v| {
            let n = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            (v + n).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Raster::gray(w, h, data).expect("scene size")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Sparse,
    Dense,
    Mixed,
    Pan,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(Self::Sparse),
            "dense" => Ok(Self::Dense),
            "mixed" => Ok(Self::Mixed),
            "pan" => Ok(Self::Pan),
            other => invalid(format!("unknown profile {other:?} (sparse, dense, mixed, pan)")),
        }
    }
}

pub const SPARSE_COUNTS: (usize, usize) = (5, 20);
pub const DENSE_COUNTS: (usize, usize) = (100, 300);

/// Scene-level settings shared by every image of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub background: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { width: 128, height: 128, background: 40.0, noise_std: 4.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Raster,
    pub annotation: PointAnnotation,
    /// The profile drawn for this image (`Sparse` or `Dense` for mixed datasets).
    pub kind: Profile,
}

fn full_rect(cfg: &SynthConfig) -> Rect {
    Rect { x0: 0.0, y0: 0.0, w: cfg.width as f64, h: cfg.height as f64 }
}

/// The scene layout for one image of `profile`.
pub fn profile_spec<R: Rng + ?Sized>(profile: Profile, cfg: &SynthConfig, seed: u64, rng: &mut R) -> (SceneSpec, Profile) {
    let uniform = |rect, count| Region { rect, count, placement: Placement::Uniform };
    let (regions, kind) = match profile {
        Profile::Sparse => (vec![uniform(full_rect(cfg), rng.random_range(SPARSE_COUNTS.0..=SPARSE_COUNTS.1))], Profile::Sparse),
        Profile::Dense => (vec![uniform(full_rect(cfg), rng.random_range(DENSE_COUNTS.0..=DENSE_COUNTS.1))], Profile::Dense),
        Profile::Mixed => {
            let kind = if rng.random_bool(0.5) { Profile::Sparse } else { Profile::Dense };
            return profile_spec(kind, cfg, seed, rng);
        }
        Profile::Pan => {
            let half = cfg.height as f64 / 2.0;
            let top = Rect { h: half, ..full_rect(cfg) };
            let bottom = Rect { y0: half, h: cfg.height as f64 - half, ..full_rect(cfg) };
            let sparse = rng.random_range(SPARSE_COUNTS.0 / 2..=SPARSE_COUNTS.1 / 2);
            let dense = rng.random_range(DENSE_COUNTS.0 / 2..=DENSE_COUNTS.1 / 2);
            (vec![uniform(top, sparse), uniform(bottom, dense)], Profile::Pan)
        }
    };
    let spec = SceneSpec {
        width: cfg.width,
        height: cfg.height,
        regions,
        head: HeadRender::default(),
        background: cfg.background,
        noise_std: cfg.noise_std,
        seed,
    };
    (spec, kind)
}

/// `m` scenes of `profile`, deterministic in `seed`.
pub fn generate_dataset(profile: Profile, m: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<Scene>> {
    if m == 0 {
        return invalid("dataset needs at least one image");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| {
            let scene_seed = rng.next_u64();
            let (spec, kind) = profile_spec(profile, cfg, scene_seed, &mut rng);
            let (image, annotation) = generate_scene(&spec)?;
            Ok(Scene { image, annotation, kind })
        })
        .collect()
}

/// Writes `img_NNNN.<ext>` plus `img_NNNN.json` annotations into `dir`.
pub fn write_dataset(dir: &Path, scenes: &[Scene], ext: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let stem = format!("img_{i:04}");
        let image_name = format!("{stem}.{ext}");
        s.image.save(&dir.join(&image_name))?;
        let mut ann = s.annotation.clone();
        ann.image = image_name;
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string(&ann).map_err(|e| Error::Invalid(e.to_string()))?;
        std::fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;
        written.push(json_path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_regions(seed: u64) -> SceneSpec {
        let left = Rect { x0: 0.0, y0: 0.0, w: 32.0, h: 64.0 };
        let right = Rect { x0: 32.0, ..left };
        SceneSpec {
            width: 64,
            height: 64,
            regions: vec![
                Region { rect: left, count: 10, placement: Placement::Uniform },
                Region { rect: right, count: 40, placement: Placement::GaussianCluster { center: [48.0, 32.0], spread: 8.0 } },
            ],
            head: HeadRender::default(),
            background: 30.0,
            noise_std: 3.0,
            seed,
        }
    }

    #[test]
    fn region_recount() {
        let spec = two_regions(4);
        let (_, ann) = generate_scene(&spec).unwrap();
        assert_eq!(ann.count(), 50);
        ann.validate().unwrap();
        for r in &spec.regions {
            assert_eq!(ann.points.iter().filter(|p| r.rect.contains(p)).count(), r.count);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_scene(&two_regions(9)).unwrap();
        let b = generate_scene(&two_regions(9)).unwrap();
        let c = generate_scene(&two_regions(10)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn empty_scene_is_noise_only() {
        let spec = SceneSpec { regions: vec![], ..two_regions(1) };
        let (img, ann) = generate_scene(&spec).unwrap();
        assert_eq!(ann.count(), 0);
        let mean = img.data.iter().map(|&v| f64::from(v)).sum::<f64>() / img.data.len() as f64;
        assert!((mean - 30.0).abs() < 1.0);
    }

    #[test]
    fn overcrowded_region_rejected() {
        let rect = Rect { x0: 0.0, y0: 0.0, w: 2.0, h: 2.0 };
        let spec = SceneSpec { regions: vec![Region { rect, count: 50, placement: Placement::Uniform }], ..two_regions(1) };
        assert!(generate_scene(&spec).is_err());
    }

    #[test]
    fn sparse_profile_counts_in_range() {
        let scenes = generate_dataset(Profile::Sparse, 10, 3, &SynthConfig::default()).unwrap();
        assert!(scenes.iter().all(|s| (5..=20).contains(&s.annotation.count())));
    }
}
