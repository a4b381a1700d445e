//! Procedurally rendered handwritten-style digits and synthetic domain
//! shifts applied to them.
//!
//! Each class has a stroke skeleton in the unit square. A sample jitters
//! the control points, applies a random affine map, and rasterizes the
//! polylines at a random pen width with a one-pixel anti-aliased edge.

use std::f32::consts::PI;

use fan_tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DomainDataset, DomainTag, IMAGE_SIDE, NUM_CLASSES};
use crate::error::{FanError, Result};

type Stroke = Vec<(f32, f32)>;

fn ellipse(cx: f32, cy: f32, rx: f32, ry: f32, from: f32, to: f32, steps: usize) -> Stroke {
    (0..=steps)
        .map(|i| {
            let t = from + (to - from) * i as f32 / steps as f32;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

fn skeleton(class: usize) -> Vec<Stroke> {
    match class {
        0 => vec![ellipse(0.5, 0.5, 0.27, 0.4, 0.0, 2.0 * PI, 20)],
        1 => vec![vec![(0.36, 0.24), (0.52, 0.1), (0.52, 0.9)]],
        2 => vec![vec![
            (0.25, 0.3),
            (0.33, 0.14),
            (0.52, 0.09),
            (0.7, 0.18),
            (0.72, 0.36),
            (0.5, 0.6),
            (0.24, 0.9),
            (0.78, 0.9),
        ]],
        3 => vec![vec![
            (0.25, 0.16),
            (0.5, 0.09),
            (0.7, 0.2),
            (0.66, 0.38),
            (0.45, 0.47),
            (0.7, 0.58),
            (0.72, 0.78),
            (0.5, 0.92),
            (0.24, 0.84),
        ]],
        4 => vec![vec![(0.6, 0.1), (0.22, 0.64), (0.8, 0.64)], vec![(0.64, 0.35), (0.64, 0.92)]],
        5 => vec![vec![
            (0.74, 0.1),
            (0.33, 0.1),
            (0.28, 0.45),
            (0.55, 0.4),
            (0.73, 0.55),
            (0.71, 0.8),
            (0.5, 0.92),
            (0.25, 0.85),
        ]],
        6 => vec![vec![
            (0.68, 0.1),
            (0.42, 0.28),
            (0.28, 0.58),
            (0.32, 0.84),
            (0.53, 0.93),
            (0.72, 0.78),
            (0.67, 0.56),
            (0.45, 0.5),
            (0.29, 0.64),
        ]],
        7 => vec![vec![(0.22, 0.12), (0.78, 0.12), (0.42, 0.9)]],
        8 => vec![
            ellipse(0.5, 0.29, 0.19, 0.18, 0.0, 2.0 * PI, 14),
            ellipse(0.5, 0.69, 0.24, 0.22, 0.0, 2.0 * PI, 16),
        ],
        9 => vec![
            ellipse(0.48, 0.32, 0.22, 0.21, 0.0, 2.0 * PI, 16),
            vec![(0.7, 0.32), (0.68, 0.9)],
        ],
        _ => unreachable!("digit class {class}"),
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn render(class: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let jitter = Normal::new(0.0f32, 0.025).expect("valid sigma");
    let angle = rng.random_range(-0.25f32..0.25);
    let shear = rng.random_range(-0.3f32..0.3);
    let (sx, sy) = (rng.random_range(0.8f32..1.1), rng.random_range(0.85f32..1.1));
    let (tx, ty) = (rng.random_range(-1.5f32..1.5), rng.random_range(-1.5f32..1.5));
    let pen = rng.random_range(1.0f32..2.2);
    let ink = rng.random_range(0.8f32..1.0);
    let (sin, cos) = angle.sin_cos();
    // Glyph box of 20 px centred in the 28 px frame, as in MNIST.
    let to_px = |(u, v): (f32, f32)| {
        let (x, y) = ((u - 0.5) * sx + shear * (v - 0.5), (v - 0.5) * sy);
        let (x, y) = (cos * x - sin * y, sin * x + cos * y);
        (14.0 + 20.0 * x + tx, 14.0 + 20.0 * y + ty)
    };
    let strokes: Vec<Stroke> = skeleton(class)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(u, v)| to_px((u + jitter.sample(rng), v + jitter.sample(rng))))
                .collect()
        })
        .collect();
    let mut img = vec![0.0f32; IMAGE_SIDE * IMAGE_SIDE];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            let d = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f32::INFINITY, f32::min);
            img[y * IMAGE_SIDE + x] = ink * (1.0 - (d - pen)).clamp(0.0, 1.0);
        }
    }
    img
}

/// `n` labeled procedural digits with uniformly drawn classes.
pub fn procedural_digits(n: usize, seed: u64) -> Result<DomainDataset> {
    if n == 0 {
        return Err(FanError::Argument("procedural dataset of size 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * IMAGE_SIDE * IMAGE_SIDE);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.random_range(0..NUM_CLASSES);
        data.extend(render(class, &mut rng));
        labels.push(class);
    }
    let images = Tensor::new(&[n, 1, IMAGE_SIDE, IMAGE_SIDE], data)?;
    DomainDataset::new(
        images,
        Some(labels),
        DomainTag::Source,
        format!("procedural digits (n={n}, seed={seed})"),
    )
}

/// Pixel-level domain shift.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shift {
    /// `p → 1 − p`.
    Invert,
    /// Additive Gaussian noise, σ = 0.2, clipped to `[0, 1]`.
    Noise,
    /// `p → 0.6·p`, clipped.
    Brightness,
}

impl Shift {
    pub const NOISE_SIGMA: f32 = 0.2;
    pub const BRIGHTNESS_SCALE: f32 = 0.6;

    pub fn name(self) -> &'static str {
        match self {
            Shift::Invert => "invert",
            Shift::Noise => "noise",
            Shift::Brightness => "brightness",
        }
    }

    pub fn parse(s: &str) -> Option<Shift> {
        match s {
            "invert" => Some(Shift::Invert),
            "noise" => Some(Shift::Noise),
            "brightness" => Some(Shift::Brightness),
            _ => None,
        }
    }

    pub fn apply(self, ds: &DomainDataset, seed: u64) -> DomainDataset {
        let images = match self {
            Shift::Invert => ds.images().map(|p| 1.0 - p),
            Shift::Brightness => ds.images().map(|p| p * Self::BRIGHTNESS_SCALE),
            Shift::Noise => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let noise = Normal::new(0.0f32, Self::NOISE_SIGMA).expect("valid sigma");
                let mut t = ds.images().clone();
                t.data_mut().iter_mut().for_each(|p| *p += noise.sample(&mut rng));
                t
            }
        };
        ds.map_pixels(images, format!("{} [{}]", ds.provenance, self.name()))
    }
}

/// `(source, target)`: the base set unchanged, and a shifted copy whose
/// labels are withheld (kept only for scoring).
pub fn synth_domain_pair(base: &DomainDataset, shift: Shift, seed: u64) -> (DomainDataset, DomainDataset) {
    let source = base.clone().with_domain(DomainTag::Source);
    let target = shift
        .apply(base, seed)
        .with_domain(DomainTag::Target)
        .withhold_labels();
    (source, target)
}
