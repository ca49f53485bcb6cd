use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{dense_degree, Point, PointAnnotation};
use crate::raster::Raster;

/// Number of patches cut from every source image before flipping.
pub const CROPS_PER_IMAGE: usize = 9;
const RANDOM_CROPS: usize = CROPS_PER_IMAGE - 4;

/// Half-open crop rectangle in resized-image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Crop {
    pub fn contains(&self, p: &Point) -> bool {
        let (x0, y0) = (self.x0 as f64, self.y0 as f64);
        p[0] >= x0 && p[0] < x0 + self.w as f64 && p[1] >= y0 && p[1] < y0 + self.h as f64
    }
}

/// One training patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub source_image: String,
    pub crop: Crop,
    pub flipped: bool,
    /// Patch-frame coordinates, already mirrored when `flipped`.
    pub points: Vec<Point>,
    #[serde(rename = "D", with = "infinite_as_null")]
    pub dense_degree: f64,
    pub level: Option<usize>,
    pub count: usize,
}

impl PatchRecord {
    /// Checks the record's own invariants against the resized source side.
    pub fn validate(&self, resize_to: usize) -> Result<()> {
        let c = self.crop;
        if c.x0 + c.w > resize_to || c.y0 + c.h > resize_to {
            return invalid(format!("crop {c:?} outside {resize_to}x{resize_to}"));
        }
        if self.count != self.points.len() {
            return invalid(format!("count {} but {} points", self.count, self.points.len()));
        }
        let frame = Crop { x0: 0, y0: 0, w: c.w, h: c.h };
        if let Some(p) = self.points.iter().find(|p| !frame.contains(p)) {
            return invalid(format!("point {p:?} outside the {}x{} patch", c.w, c.h));
        }
        Ok(())
    }

    /// The same crop mirrored the other way.
    pub fn with_flip(&self, flipped: bool) -> Self {
        if flipped == self.flipped {
            return self.clone();
        }
        let w = self.crop.w as f64;
        let points = self.points.iter().map(|p| [mirror(p[0], w), p[1]]).collect();
        Self { flipped, points, ..self.clone() }
    }
}

/// Horizontal mirror of `x` within `[0, w)`; the image edge maps just inside.
fn mirror(x: f64, w: f64) -> f64 {
    (w - x).min(w.next_down())
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Patch extraction settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchConfig {
    /// Side of the square every source image is resized to; patches are half that.
    pub resize_to: usize,
    /// Neighbours per head in the dense degree.
    pub q: usize,
}

impl PatchConfig {
    pub fn patch_size(&self) -> usize {
        self.resize_to / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.resize_to < 2 || self.resize_to % 2 != 0 {
            return invalid(format!("resize_to must be even and >= 2, got {}", self.resize_to));
        }
        if self.q == 0 {
            return invalid("Q must be at least 1");
        }
        Ok(())
    }
}

/// Annotation points mapped into the `resize_to x resize_to` frame.
pub fn scale_points(ann: &PointAnnotation, resize_to: usize) -> Vec<Point> {
    let sx = resize_to as f64 / ann.width as f64;
    let sy = resize_to as f64 / ann.height as f64;
    let limit = (resize_to as f64).next_down();
    ann.points.iter().map(|p| [(p[0] * sx).min(limit), (p[1] * sy).min(limit)]).collect()
}

/// Builds the record for `crop` of the resized point set.
pub fn make_record(source: &str, scaled: &[Point], crop: Crop, flipped: bool, q: usize) -> PatchRecord {
    let (x0, y0) = (crop.x0 as f64, crop.y0 as f64);
    let w = crop.w as f64;
    let points: Vec<Point> = scaled
        .iter()
        .filter(|p| crop.contains(p))
        .map(|p| {
            let x = p[0] - x0;
            [if flipped { mirror(x, w) } else { x }, p[1] - y0]
        })
        .collect();
    PatchRecord {
        source_image: source.to_string(),
        crop,
        flipped,
        dense_degree: dense_degree(&points, q),
        level: None,
        count: points.len(),
        points,
    }
}

/// A crop of side `resize_to / 2` with origin drawn uniformly from all valid positions.
pub fn random_crop<R: Rng + ?Sized>(cfg: &PatchConfig, rng: &mut R) -> Crop {
    let half = cfg.patch_size();
    let span = cfg.resize_to - half;
    Crop { x0: rng.random_range(0..=span), y0: rng.random_range(0..=span), w: half, h: half }
}

/// Four quarter crops and five random crops, each emitted as-is and flipped:
/// 18 records, the nine unflipped ones first.
pub fn extract_patches<R: Rng + ?Sized>(
    source: &str,
    image: &Raster,
    ann: &PointAnnotation,
    cfg: &PatchConfig,
    rng: &mut R,
) -> Result<Vec<PatchRecord>> {
    cfg.validate()?;
    if image.width != ann.width || image.height != ann.height {
        return invalid(format!(
            "{source}: image is {}x{} but annotation says {}x{}",
            image.width, image.height, ann.width, ann.height
        ));
    }
    ann.validate()?;
    let scaled = scale_points(ann, cfg.resize_to);
    let half = cfg.patch_size();
    let mut crops = Vec::with_capacity(CROPS_PER_IMAGE);
    for (qx, qy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        crops.push(Crop { x0: qx * half, y0: qy * half, w: half, h: half });
    }
    for _ in 0..RANDOM_CROPS {
        crops.push(random_crop(cfg, rng));
    }
    let mut out: Vec<PatchRecord> =
        crops.iter().map(|&c| make_record(source, &scaled, c, false, cfg.q)).collect();
    let flipped: Vec<PatchRecord> = out.iter().map(|r| r.with_flip(true)).collect();
    out.extend(flipped);
    Ok(out)
}

/// Pixels of a record: resize the source, crop, and mirror when flagged.
pub fn render_patch(image: &Raster, record: &PatchRecord, resize_to: usize) -> Result<Raster> {
    let c = record.crop;
    let patch = image.resize(resize_to, resize_to).crop(c.x0, c.y0, c.w, c.h)?;
    Ok(if record.flipped { patch.flip_horizontal() } else { patch })
}
