use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{LabelMap, Tensor};

const BACKGROUND: f32 = 0.5;
const MAX_RETRIES: usize = 64;

const PALETTE: [[f32; 3]; 9] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.25, 0.90],
    [0.90, 0.85, 0.15],
    [0.80, 0.20, 0.80],
    [0.15, 0.80, 0.80],
    [0.95, 0.55, 0.10],
    [0.10, 0.10, 0.10],
    [0.95, 0.95, 0.95],
];

/// Base RGB color of shape class `class` (1-based; 0 is background gray).
pub fn palette(class: usize) -> [f32; 3] {
    if class == 0 {
        [BACKGROUND; 3]
    } else {
        PALETTE[(class - 1) % PALETTE.len()]
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapesConfig {
    /// Image height and width.
    pub size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Background plus `classes - 1` shape classes.
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub noise_std: f64,
    /// Shape colors are pulled toward the background gray by this factor.
    #[serde(default = "default_contrast")]
    pub contrast: f64,
    #[serde(default)]
    pub seed: u64,
    pub train: usize,
    pub val: usize,
}

fn default_channels() -> usize {
    3
}

fn default_contrast() -> f64 {
    1.0
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            size: 32,
            channels: 3,
            classes: 4,
            min_shapes: 2,
            max_shapes: 4,
            noise_std: 0.05,
            contrast: 1.0,
            seed: 0,
            train: 256,
            val: 50,
        }
    }
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if ![32, 64].contains(&self.size) {
            return Err(Error::config(format!("image size must be 32 or 64, got {}", self.size)));
        }
        if self.channels != 3 {
            return Err(Error::config("shapes images are RGB (channels = 3)"));
        }
        if !(2..=PALETTE.len() + 1).contains(&self.classes) {
            return Err(Error::config(format!(
                "classes must lie in 2..={}, got {}",
                PALETTE.len() + 1,
                self.classes
            )));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::config("min_shapes exceeds max_shapes"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be finite and non-negative"));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::config("contrast must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.train + self.val
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeGeometry {
    /// Half-open integer pixel box `[x0, x1) x [y0, y1)`.
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
    Disc { cx: f64, cy: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub class: u8,
    pub geometry: ShapeGeometry,
}

impl Shape {
    /// Whether the center of pixel `(x, y)` lies inside the shape.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match self.geometry {
            ShapeGeometry::Rect { x0, y0, x1, y1 } => (x0..x1).contains(&x) && (y0..y1).contains(&y),
            ShapeGeometry::Disc { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            ShapeGeometry::Triangle { pts } => {
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                };
                let d = [edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }

    /// Inclusive-exclusive pixel bounds `(x0, y0, x1, y1)` clipped to `size`.
    fn bounds(&self, size: usize) -> (usize, usize, usize, usize) {
        let clip = |v: f64| v.floor().clamp(0.0, size as f64) as usize;
        let clip_hi = |v: f64| (v.ceil() + 1.0).clamp(0.0, size as f64) as usize;
        match self.geometry {
            ShapeGeometry::Rect { x0, y0, x1, y1 } => (x0, y0, x1.min(size), y1.min(size)),
            ShapeGeometry::Disc { cx, cy, r } => (clip(cx - r), clip(cy - r), clip_hi(cx + r), clip_hi(cy + r)),
            ShapeGeometry::Triangle { pts } => {
                let xs = pts.map(|p| p.0);
                let ys = pts.map(|p| p.1);
                let lo = |v: [f64; 3]| v.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = |v: [f64; 3]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (clip(lo(xs)), clip(lo(ys)), clip_hi(hi(xs)), clip_hi(hi(ys)))
            }
        }
    }

    fn covered_pixels(&self, size: usize) -> usize {
        let (x0, y0, x1, y1) = self.bounds(size);
        (y0..y1)
            .flat_map(|y| (x0..x1).map(move |x| (x, y)))
            .filter(|&(x, y)| self.contains(x, y))
            .count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
}

fn sample_geometry(r: &mut ChaCha8Rng, size: usize) -> ShapeGeometry {
    let s = size as f64;
    match r.random_range(0..3) {
        0 => {
            let (lo, hi) = (size / 8, size / 2);
            let w = r.random_range(lo..=hi);
            let h = r.random_range(lo..=hi);
            let x0 = r.random_range(0..=size - w);
            let y0 = r.random_range(0..=size - h);
            ShapeGeometry::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
        }
        1 => {
            let rad = r.random_range(s / 10.0..s / 4.0);
            let cx = r.random_range(rad..s - rad);
            let cy = r.random_range(rad..s - rad);
            ShapeGeometry::Disc { cx, cy, r: rad }
        }
        _ => {
            let side = r.random_range(s / 4.0..s / 2.0);
            let ox = r.random_range(0.0..s - side);
            let oy = r.random_range(0.0..s - side);
            let mut pt = || (ox + r.random_range(0.0..side), oy + r.random_range(0.0..side));
            ShapeGeometry::Triangle { pts: [pt(), pt(), pt()] }
        }
    }
}

fn triangle_area(pts: &[(f64, f64); 3]) -> f64 {
    let [(ax, ay), (bx, by), (cx, cy)] = *pts;
    0.5 * ((bx - ax) * (cy - ay) - (cx - ax) * (by - ay)).abs()
}

/// Generates sample `index`, returning the painted shapes in paint order.
pub fn gen_sample(cfg: &ShapesConfig, index: u64) -> Result<(SegSample, Vec<Shape>)> {
    let size = cfg.size;
    let mut r = rng::stream(cfg.seed, index);
    let k = r.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut shapes = Vec::with_capacity(k);
    for _ in 0..k {
        let class = r.random_range(1..cfg.classes) as u8;
        let mut accepted = None;
        for _ in 0..MAX_RETRIES {
            let geometry = sample_geometry(&mut r, size);
            let degenerate = match geometry {
                ShapeGeometry::Triangle { pts } => triangle_area(&pts) < 1.0,
                _ => false,
            };
            let shape = Shape { class, geometry };
            if !degenerate && shape.covered_pixels(size) > 0 {
                accepted = Some(shape);
                break;
            }
        }
        shapes.push(accepted.ok_or_else(|| {
            Error::config(format!("sample {index}: could not place a non-degenerate shape"))
        })?);
    }

    let plane = size * size;
    let mut labels = vec![0u8; plane];
    for s in &shapes {
        let (x0, y0, x1, y1) = s.bounds(size);
        for y in y0..y1 {
            for x in x0..x1 {
                if s.contains(x, y) {
                    labels[y * size + x] = s.class;
                }
            }
        }
    }

    let mut image = vec![0f32; cfg.channels * plane];
    for (i, &l) in labels.iter().enumerate() {
        let color = palette(usize::from(l));
        for c in 0..cfg.channels {
            let base = f64::from(BACKGROUND);
            image[c * plane + i] = (base + cfg.contrast * (f64::from(color[c]) - base)) as f32;
        }
    }
    if cfg.noise_std > 0.0 {
        for v in &mut image {
            let z: f64 = StandardNormal.sample(&mut r);
            *v = (f64::from(*v) + cfg.noise_std * z).clamp(0.0, 1.0) as f32;
        }
    }
    Ok((
        SegSample {
            image: Tensor::new(vec![cfg.channels, size, size], image)?,
            labels: LabelMap::new(size, size, labels)?,
        },
        shapes,
    ))
}

/// Generates `cfg.train + cfg.val` samples; indices `0..train` form the
/// training split and `train..train+val` the validation split.
pub fn gen_dataset(cfg: &ShapesConfig) -> Result<Vec<SegSample>> {
    cfg.validate()?;
    (0..cfg.total() as u64)
        .map(|i| gen_sample(cfg, i).map(|(s, _)| s))
        .collect()
}
