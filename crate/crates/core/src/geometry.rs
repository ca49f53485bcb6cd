//! Point-annotation geometry: nearest-neighbour distances, the dense degree of a
//! patch, geometry-adaptive density maps, and count-preserving downsampling.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// `(x, y)` in pixels; pixel `(c, r)` covers `[c, c+1) x [r, r+1)`.
pub type Point = [f64; 2];

/// Head annotations of one image. JSON:
/// `{"image": string, "width": int, "height": int, "points": [[x, y], ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    #[serde(default)]
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<Point>,
}

impl PointAnnotation {
    pub fn new(width: usize, height: usize, points: Vec<Point>) -> Self {
        Self { image: String::new(), width, height, points }
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return invalid(format!("annotation {:?} has zero-size image", self.image));
        }
        for (i, p) in self.points.iter().enumerate() {
            if !(p[0] >= 0.0 && p[0] < self.width as f64 && p[1] >= 0.0 && p[1] < self.height as f64) {
                return invalid(format!(
                    "annotation {:?}: point {i} ({}, {}) outside {}x{}",
                    self.image, p[0], p[1], self.width, self.height
                ));
            }
        }
        Ok(())
    }

    pub fn knn_distances(&self, q: usize) -> Vec<Vec<f64>> {
        knn_distances(&self.points, q)
    }

    pub fn dense_degree(&self, q: usize) -> f64 {
        dense_degree(&self.points, q)
    }
}

fn dist(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// For every point, the ascending distances to its `min(q, P-1)` nearest other points.
pub fn knn_distances(points: &[Point], q: usize) -> Vec<Vec<f64>> {
    let q = q.max(1);
    let mut row = Vec::with_capacity(points.len());
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            row.clear();
            row.extend(points.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, o)| dist(p, o)));
            let keep = q.min(row.len());
            if keep > 0 && keep < row.len() {
                row.select_nth_unstable_by(keep - 1, f64::total_cmp);
            }
            let mut nearest = row[..keep].to_vec();
            nearest.sort_by(f64::total_cmp);
            nearest
        })
        .collect()
}

/// Per-point sum of the `q` nearest-neighbour distances, averaged over points.
/// Smaller is denser. Returns `+inf` when fewer than two points exist.
pub fn dense_degree(points: &[Point], q: usize) -> f64 {
    if points.len() < 2 {
        return f64::INFINITY;
    }
    let total: f64 = knn_distances(points, q).iter().map(|d| d.iter().sum::<f64>()).sum();
    total / points.len() as f64
}

/// Non-negative grid whose integral is a people count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![0.0; height * width] }
    }

    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return invalid(format!("{} values for a {height}x{width} map", values.len()));
        }
        Ok(Self { height, width, values })
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// Sum of all cells, accumulated in double precision.
    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v)).sum()
    }

    /// Sum over the half-open rectangle `[r0, r1) x [c0, c1)`.
    pub fn region_sum(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
        (r0..r1)
            .map(|r| self.values[r * self.width + c0..r * self.width + c1].iter().map(|&v| f64::from(v)).sum::<f64>())
            .sum()
    }

    /// Zero-extends the bottom and right edges up to multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Self {
        let h = self.height.div_ceil(m) * m;
        let w = self.width.div_ceil(m) * m;
        if h == self.height && w == self.width {
            return self.clone();
        }
        let mut out = Self::zeros(h, w);
        for r in 0..self.height {
            out.values[r * w..r * w + self.width].copy_from_slice(&self.values[r * self.width..(r + 1) * self.width]);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    Adaptive,
    Fixed,
}

/// How each head's Gaussian width is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelPolicy {
    pub mode: KernelMode,
    /// Adaptive: `sigma_i = beta * mean distance to the k nearest heads`.
    pub beta: f64,
    pub k: usize,
    pub sigma_fixed: f64,
    /// Adaptive mode with fewer than two heads.
    pub sigma_default: f64,
}

impl Default for KernelPolicy {
    fn default() -> Self {
        Self { mode: KernelMode::Adaptive, beta: 0.3, k: 3, sigma_fixed: 3.0, sigma_default: 3.0 }
    }
}

impl KernelPolicy {
    pub fn fixed(sigma: f64) -> Self {
        Self { mode: KernelMode::Fixed, sigma_fixed: sigma, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.beta > 0.0 && self.k >= 1 && self.sigma_fixed > 0.0 && self.sigma_default > 0.0;
        if !ok {
            return invalid(format!("kernel policy needs beta > 0, k >= 1, sigmas > 0: {self:?}"));
        }
        Ok(())
    }

    /// Gaussian width for every head of `points`.
    pub fn sigmas(&self, points: &[Point]) -> Vec<f64> {
        match self.mode {
            KernelMode::Fixed => vec![self.sigma_fixed; points.len()],
            KernelMode::Adaptive if points.len() < 2 => vec![self.sigma_default; points.len()],
            KernelMode::Adaptive => knn_distances(points, self.k)
                .into_iter()
                .map(|d| self.beta * d.iter().sum::<f64>() / d.len() as f64)
                .collect(),
        }
    }
}

/// Below this width a head's whole mass lands in the pixel containing it.
const MIN_SIGMA: f64 = 1e-3;

/// Deposits one normalized Gaussian per head. Each kernel is truncated to a square window
/// of half-width `ceil(4 sigma)`, clipped to the image, and renormalized within the
/// clipped window, so every head contributes exactly one unit of mass.
pub fn generate_density_map(ann: &PointAnnotation, policy: &KernelPolicy) -> Result<DensityMap> {
    if ann.width == 0 || ann.height == 0 {
        return invalid("cannot build a density map for a zero-size image");
    }
    policy.validate()?;
    let (w, h) = (ann.width, ann.height);
    let mut acc = vec![0.0f64; w * h];
    let mut weights = Vec::new();
    for (p, sigma) in ann.points.iter().zip(policy.sigmas(&ann.points)) {
        let cx = (p[0].floor().max(0.0) as usize).min(w - 1);
        let cy = (p[1].floor().max(0.0) as usize).min(h - 1);
        if !(sigma >= MIN_SIGMA) {
            acc[cy * w + cx] += 1.0;
            continue;
        }
        let r = (4.0 * sigma).ceil() as usize;
        let (x0, x1) = (cx.saturating_sub(r), (cx + r).min(w - 1));
        let (y0, y1) = (cy.saturating_sub(r), (cy + r).min(h - 1));
        let inv = 1.0 / (2.0 * sigma * sigma);
        weights.clear();
        let mut total = 0.0;
        for y in y0..=y1 {
            let dy = y as f64 + 0.5 - p[1];
            for x in x0..=x1 {
                let dx = x as f64 + 0.5 - p[0];
                let v = (-(dx * dx + dy * dy) * inv).exp();
                weights.push(v);
                total += v;
            }
        }
        let mut it = weights.iter();
        for y in y0..=y1 {
            for x in x0..=x1 {
                acc[y * w + x] += it.next().expect("window weight") / total;
            }
        }
    }
    Ok(DensityMap { height: h, width: w, values: acc.into_iter().map(|v| v as f32).collect() })
}

/// Each output cell is the sum of a `factor x factor` input block.
pub fn sum_pool_downsample(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    if factor == 0 || map.height % factor != 0 || map.width % factor != 0 {
        return invalid(format!("factor {factor} does not divide a {}x{} map", map.height, map.width));
    }
    let (oh, ow) = (map.height / factor, map.width / factor);
    let mut acc = vec![0.0f64; oh * ow];
    for r in 0..map.height {
        for c in 0..map.width {
            acc[(r / factor) * ow + c / factor] += f64::from(map.values[r * map.width + c]);
        }
    }
    Ok(DensityMap { height: oh, width: ow, values: acc.into_iter().map(|v| v as f32).collect() })
}
