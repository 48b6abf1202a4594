//! Procedural scenes: a striped, tinted background with rectangles, discs
//! and triangles painted over it. Class `c ≥ 1` always uses the same shape
//! kind (`(c - 1) % 3`) and a fixed base color; later shapes occlude
//! earlier ones. Every sample draws from its own seeded stream, so a sample
//! does not depend on how many others are generated.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::backbone::OUTPUT_STRIDE;
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub samples: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            image_size: 64,
            samples: 32,
            min_shapes: 2,
            max_shapes: 4,
            noise_std: 6.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > usize::from(IGNORE_LABEL) {
            return Err(Error::Config(format!(
                "num_classes must be in 2..={}, got {}",
                IGNORE_LABEL, self.num_classes
            )));
        }
        if self.image_size == 0 || self.image_size % OUTPUT_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of {}, got {}",
                OUTPUT_STRIDE, self.image_size
            )));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config("min_shapes exceeds max_shapes".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(
                "noise_std must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Geometry {
    /// Half-open pixel box `[x0, x1) × [y0, y1)`.
    Rect {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
    },
    Disc {
        cx: f64,
        cy: f64,
        radius: f64,
    },
    Triangle {
        points: [(f64, f64); 3],
    },
}

impl Geometry {
    /// Whether pixel `(x, y)` is covered, tested at its center.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Geometry::Rect { x0, y0, x1, y1 } => (x0..x1).contains(&x) && (y0..y1).contains(&y),
            Geometry::Disc { cx, cy, radius } => {
                (px - cx).powi(2) + (py - cy).powi(2) <= radius * radius
            }
            Geometry::Triangle { points: [a, b, c] } => {
                let edge = |p: (f64, f64), q: (f64, f64)| {
                    (q.0 - p.0) * (py - p.1) - (q.1 - p.1) * (px - p.0)
                };
                let (d1, d2, d3) = (edge(a, b), edge(b, c), edge(c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacedShape {
    pub class: u8,
    pub geometry: Geometry,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: String,
    /// `3×H×W`, integral values in `[0, 255]`.
    pub image: Tensor,
    pub labels: LabelMap,
    /// In painting order.
    pub shapes: Vec<PlacedShape>,
}

const BACKGROUND: [f64; 3] = [96.0, 104.0, 112.0];
const PALETTE: [[f64; 3]; 6] = [
    [220.0, 52.0, 44.0],
    [40.0, 190.0, 72.0],
    [48.0, 84.0, 220.0],
    [230.0, 200.0, 40.0],
    [200.0, 60.0, 210.0],
    [40.0, 200.0, 210.0],
];

/// Base color of a shape class; classes past the palette get a hashed hue.
pub fn class_color(class: usize) -> [f64; 3] {
    match PALETTE.get(class - 1) {
        Some(&c) => c,
        None => {
            let h = (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            [
                (h & 0xFF) as f64,
                ((h >> 8) & 0xFF) as f64,
                ((h >> 16) & 0xFF) as f64,
            ]
        }
    }
}

pub fn sample_id(index: usize) -> String {
    format!("s{:04}", index)
}

/// Generates sample `index` of the dataset described by `cfg`.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> Result<SynthSample> {
    cfg.validate()?;
    let id = sample_id(index);
    let mut rng = rng::stream(cfg.seed, &id);
    let size = cfg.image_size;
    let s = size as f64;

    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let period: f64 = rng.random_range(6.0..16.0);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-12.0..12.0));

    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(1..cfg.num_classes);
        let base = class_color(class);
        let color = base.map(|c| (c + rng.random_range(-10.0..10.0)).clamp(0.0, 255.0));
        let extent = rng.random_range(0.2 * s..0.45 * s);
        let cx = rng.random_range(0.15 * s..0.85 * s);
        let cy = rng.random_range(0.15 * s..0.85 * s);
        let geometry = match (class - 1) % 3 {
            0 => {
                let aspect: f64 = rng.random_range(0.6..1.6);
                let (hw, hh) = (extent * aspect.sqrt() / 2.0, extent / aspect.sqrt() / 2.0);
                let clampi = |v: f64| v.round().clamp(0.0, s) as usize;
                Geometry::Rect {
                    x0: clampi(cx - hw),
                    y0: clampi(cy - hh),
                    x1: clampi(cx + hw),
                    y1: clampi(cy + hh),
                }
            }
            1 => Geometry::Disc {
                cx,
                cy,
                radius: extent / 2.0,
            },
            _ => {
                let rot: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r = extent * 0.6;
                Geometry::Triangle {
                    points: std::array::from_fn(|k| {
                        let a = rot + k as f64 * std::f64::consts::TAU / 3.0;
                        (cx + r * a.cos(), cy + r * a.sin())
                    }),
                }
            }
        };
        shapes.push(PlacedShape {
            class: class as u8,
            geometry,
            color,
        });
    }

    let labels = rasterize(&shapes, size, size);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let top = shapes.iter().rev().find(|sh| sh.geometry.covers(x, y));
            let stripe = ((x as f64 * angle.cos() + y as f64 * angle.sin())
                * std::f64::consts::TAU
                / period
                + phase)
                .sin();
            for c in 0..3 {
                let clean = match top {
                    Some(sh) => sh.color[c],
                    None => BACKGROUND[c] + tint[c] + 18.0 * stripe,
                };
                let n = if cfg.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data[c * plane + i] = (clean + n).round().clamp(0.0, 255.0);
            }
        }
    }
    Ok(SynthSample {
        id,
        image: Tensor::new([3, size, size], data)?,
        labels,
        shapes,
    })
}

/// Label map of the topmost covering shape at each pixel, background 0.
pub fn rasterize(shapes: &[PlacedShape], height: usize, width: usize) -> LabelMap {
    let mut labels = LabelMap::filled(1, height, width, 0);
    for y in 0..height {
        for x in 0..width {
            if let Some(sh) = shapes.iter().rev().find(|sh| sh.geometry.covers(x, y)) {
                labels.data_mut()[y * width + x] = sh.class;
            }
        }
    }
    labels
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    (0..cfg.samples).map(|i| generate_sample(cfg, i)).collect()
}
