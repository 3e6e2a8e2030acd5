//! Procedural glyph domains of graded visual complexity.
//!
//! Every image shows one glyph whose identity is the class label. The
//! generator kinds add nuisance variation in increasing amounts:
//!
//! | kind              | rank | variation                                         |
//! |-------------------|------|---------------------------------------------------|
//! | `shapes`          | 1    | position/scale jitter, flat colours               |
//! | `rotated-shapes`  | 2    | + rotation, wider scale range                     |
//! | `textured-shapes` | 3    | + striped glyph fill over a textured background   |
//! | `cluttered-shapes`| 4    | + occluding strokes and blobs, low contrast, noise |
//!
//! Pixels are quantized to multiples of 1/255 so that datasets survive a
//! round trip through byte-valued file formats unchanged.

use std::f32::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};

pub const GLYPH_COUNT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Shapes,
    RotatedShapes,
    TexturedShapes,
    ClutteredShapes,
}

impl GeneratorKind {
    pub fn complexity_rank(self) -> u32 {
        match self {
            GeneratorKind::Shapes => 1,
            GeneratorKind::RotatedShapes => 2,
            GeneratorKind::TexturedShapes => 3,
            GeneratorKind::ClutteredShapes => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Shapes => "shapes",
            GeneratorKind::RotatedShapes => "rotated-shapes",
            GeneratorKind::TexturedShapes => "textured-shapes",
            GeneratorKind::ClutteredShapes => "cluttered-shapes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    pub kind: GeneratorKind,
    pub classes: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    #[serde(default = "default_image_shape")]
    pub image_shape: [usize; 3],
    #[serde(default = "default_noise")]
    pub noise: f32,
    /// Offset into the glyph library; distinct palettes give distinct class sets.
    #[serde(default)]
    pub palette: usize,
}

fn default_image_shape() -> [usize; 3] {
    [3, 16, 16]
}

fn default_noise() -> f32 {
    0.03
}

impl SyntheticDomainSpec {
    pub fn new(kind: GeneratorKind, classes: usize, samples_per_class: usize, test_per_class: usize) -> Self {
        SyntheticDomainSpec {
            kind,
            classes,
            samples_per_class,
            test_per_class,
            image_shape: default_image_shape(),
            noise: default_noise(),
            palette: 0,
        }
    }

    pub fn with_palette(mut self, palette: usize) -> Self {
        self.palette = palette;
        self
    }

    pub fn complexity_rank(&self) -> u32 {
        self.kind.complexity_rank()
    }

    /// Glyph id drawn for each class.
    pub fn glyphs(&self) -> Vec<usize> {
        (0..self.classes).map(|c| (self.palette * 7 + c) % GLYPH_COUNT).collect()
    }
}

/// Renders the train and test splits. The two splits use independent seeds
/// derived from `seed`.
pub fn generate_domain(spec: &SyntheticDomainSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 {
        return Err(Error::Invalid(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.classes > GLYPH_COUNT {
        return Err(Error::Invalid(format!("at most {GLYPH_COUNT} classes supported")));
    }
    let [c, h, w] = spec.image_shape;
    if c != 3 && c != 1 || h < 4 || w < 4 {
        return Err(Error::Invalid(format!("unsupported image shape {:?}", spec.image_shape)));
    }
    if spec.samples_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::Invalid("samples per class must be positive".into()));
    }
    let train = render_split(spec, spec.samples_per_class, derive_seed(seed, "train"))?;
    let test = render_split(spec, spec.test_per_class, derive_seed(seed, "test"))?;
    Ok((train, test))
}

fn render_split(spec: &SyntheticDomainSpec, per_class: usize, seed: u64) -> Result<Dataset> {
    let mut rng = seeded(seed);
    let glyphs = spec.glyphs();
    let [c, h, w] = spec.image_shape;
    let mut images = Vec::with_capacity(per_class * spec.classes * c * h * w);
    let mut labels = Vec::with_capacity(per_class * spec.classes);
    for _ in 0..per_class {
        for (label, &glyph) in glyphs.iter().enumerate() {
            images.extend(render_sample(spec, glyph, &mut rng));
            labels.push(label);
        }
    }
    Dataset::new(images, labels, spec.image_shape, spec.classes)
}

type Rgb = [f32; 3];

fn random_color(rng: &mut Rng, lo: f32, hi: f32) -> Rgb {
    // random hue at fixed brightness band
    let hue = rng.random_range(0.0..1.0f32);
    let v = rng.random_range(lo..hi);
    let s = rng.random_range(0.4..0.9f32);
    hsv(hue, s, v)
}

fn hsv(h: f32, s: f32, v: f32) -> Rgb {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, Copy)]
enum Fill {
    Flat(Rgb),
    Stripes { a: Rgb, b: Rgb, freq: f32, dir: (f32, f32), phase: f32 },
    Checker { a: Rgb, b: Rgb, size: f32 },
}

impl Fill {
    fn at(&self, x: f32, y: f32) -> Rgb {
        match *self {
            Fill::Flat(c) => c,
            Fill::Stripes { a, b, freq, dir, phase } => {
                let t = ((x * dir.0 + y * dir.1) * freq + phase).sin();
                if t > 0.0 {
                    a
                } else {
                    b
                }
            }
            Fill::Checker { a, b, size } => {
                if ((x / size).floor() as i32 + (y / size).floor() as i32) % 2 == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }

    fn stripes(rng: &mut Rng, a: Rgb, b: Rgb) -> Fill {
        let angle = rng.random_range(0.0..PI);
        Fill::Stripes {
            a,
            b,
            freq: rng.random_range(5.0..9.0),
            dir: (angle.cos(), angle.sin()),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Placement {
    cx: f32,
    cy: f32,
    scale: f32,
    cos: f32,
    sin: f32,
}

impl Placement {
    /// Maps image coordinates (in [-1, 1]) into glyph-local coordinates.
    fn local(&self, x: f32, y: f32) -> (f32, f32) {
        let (dx, dy) = ((x - self.cx) / self.scale, (y - self.cy) / self.scale);
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }
}

#[derive(Debug, Clone, Copy)]
enum Clutter {
    Stroke { x0: f32, y0: f32, x1: f32, y1: f32, width: f32, color: Rgb },
    Blob { cx: f32, cy: f32, r: f32, color: Rgb },
}

impl Clutter {
    fn covers(&self, x: f32, y: f32) -> Option<Rgb> {
        match *self {
            Clutter::Stroke { x0, y0, x1, y1, width, color } => {
                let (vx, vy) = (x1 - x0, y1 - y0);
                let len2 = vx * vx + vy * vy;
                let t = (((x - x0) * vx + (y - y0) * vy) / len2).clamp(0.0, 1.0);
                let (px, py) = (x0 + t * vx - x, y0 + t * vy - y);
                (px * px + py * py <= width * width).then_some(color)
            }
            Clutter::Blob { cx, cy, r, color } => {
                ((x - cx).powi(2) + (y - cy).powi(2) <= r * r).then_some(color)
            }
        }
    }
}

fn render_sample(spec: &SyntheticDomainSpec, glyph: usize, rng: &mut Rng) -> Vec<f32> {
    let [channels, h, w] = spec.image_shape;
    let (rot, scale_lo, scale_hi, shift) = match spec.kind {
        GeneratorKind::Shapes => (0.0, 0.75, 0.95, 0.15),
        GeneratorKind::RotatedShapes => (0.7, 0.6, 0.95, 0.22),
        GeneratorKind::TexturedShapes => (0.35, 0.65, 0.95, 0.2),
        GeneratorKind::ClutteredShapes => (0.7, 0.55, 0.9, 0.25),
    };
    let angle: f32 = if rot > 0.0 { rng.random_range(-rot..rot) } else { 0.0 };
    let place = Placement {
        cx: rng.random_range(-shift..shift),
        cy: rng.random_range(-shift..shift),
        scale: 0.62 * rng.random_range(scale_lo..scale_hi),
        cos: angle.cos(),
        sin: angle.sin(),
    };
    let (fg, bg) = match spec.kind {
        GeneratorKind::Shapes | GeneratorKind::RotatedShapes => (
            Fill::Flat(random_color(rng, 0.75, 1.0)),
            Fill::Flat(random_color(rng, 0.0, 0.3)),
        ),
        GeneratorKind::TexturedShapes => {
            let fa = random_color(rng, 0.75, 1.0);
            let fb = random_color(rng, 0.5, 0.7);
            let ba = random_color(rng, 0.0, 0.25);
            let bb = random_color(rng, 0.15, 0.4);
            let bg = if rng.random_bool(0.5) {
                Fill::stripes(rng, ba, bb)
            } else {
                Fill::Checker { a: ba, b: bb, size: rng.random_range(0.15..0.35) }
            };
            (Fill::stripes(rng, fa, fb), bg)
        }
        GeneratorKind::ClutteredShapes => {
            let fa = random_color(rng, 0.7, 1.0);
            let fb = random_color(rng, 0.5, 0.7);
            (Fill::stripes(rng, fa, fb), Fill::Flat(random_color(rng, 0.05, 0.3)))
        }
    };
    let clutter: Vec<Clutter> = if spec.kind == GeneratorKind::ClutteredShapes {
        let n = rng.random_range(2..5);
        (0..n)
            .map(|_| {
                let color = random_color(rng, 0.3, 0.8);
                if rng.random_bool(0.6) {
                    Clutter::Stroke {
                        x0: rng.random_range(-1.0..1.0),
                        y0: rng.random_range(-1.0..1.0),
                        x1: rng.random_range(-1.0..1.0),
                        y1: rng.random_range(-1.0..1.0),
                        width: rng.random_range(0.04..0.08),
                        color,
                    }
                } else {
                    Clutter::Blob {
                        cx: rng.random_range(-1.0..1.0),
                        cy: rng.random_range(-1.0..1.0),
                        r: rng.random_range(0.08..0.18),
                        color,
                    }
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    // Some clutter items are drawn above the glyph, occluding it.
    let occluders = clutter.len() / 3;
    let noise = Normal::new(0.0f32, spec.noise.max(1e-6)).expect("valid std");
    let noise_scale = if spec.kind == GeneratorKind::ClutteredShapes { 1.5 } else { 1.0 };

    let mut img = vec![0.0f32; channels * h * w];
    const SUB: [f32; 2] = [0.25, 0.75];
    for py in 0..h {
        for px in 0..w {
            let mut acc = [0.0f32; 3];
            for sy in SUB {
                for sx in SUB {
                    let x = 2.0 * (px as f32 + sx) / w as f32 - 1.0;
                    let y = 2.0 * (py as f32 + sy) / h as f32 - 1.0;
                    let (u, v) = place.local(x, y);
                    let mut color = bg.at(x, y);
                    for item in &clutter[occluders..] {
                        if let Some(c) = item.covers(x, y) {
                            color = c;
                        }
                    }
                    if glyph_inside(glyph, u, v) {
                        color = fg.at(u, v);
                    }
                    for item in &clutter[..occluders] {
                        if let Some(c) = item.covers(x, y) {
                            color = c;
                        }
                    }
                    for k in 0..3 {
                        acc[k] += 0.25 * color[k];
                    }
                }
            }
            let gray = (acc[0] + acc[1] + acc[2]) / 3.0;
            for ch in 0..channels {
                let base = if channels == 1 { gray } else { acc[ch] };
                let value = base + noise_scale * noise.sample(rng);
                img[(ch * h + py) * w + px] = quantize(value);
            }
        }
    }
    img
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Membership test for glyph `id` in local coordinates (unit glyph in [-1, 1]²).
fn glyph_inside(id: usize, u: f32, v: f32) -> bool {
    let r = (u * u + v * v).sqrt();
    let ax = u.abs();
    let ay = v.abs();
    match id {
        0 => r <= 0.8,
        1 => ax.max(ay) <= 0.7,
        2 => (-0.75..=0.6).contains(&v) && ax <= 0.75 * (v + 0.75) / 1.35,
        3 => (0.45..=0.8).contains(&r),
        4 => (ax <= 0.22 && ay <= 0.8) || (ay <= 0.22 && ax <= 0.8),
        5 => ax <= 0.85 && ay <= 0.25,
        6 => u * u + (v - 0.3).powi(2) <= 0.64 && v <= 0.3,
        7 => ((u + 0.45).abs() <= 0.2 && ay <= 0.8) || ((v - 0.6).abs() <= 0.2 && (-0.65..=0.7).contains(&u)),
        8 => ((v + 0.6).abs() <= 0.2 && ax <= 0.8) || (ax <= 0.2 && ay <= 0.8),
        9 => (u + 0.45).powi(2) + v * v <= 0.09 || (u - 0.45).powi(2) + v * v <= 0.09,
        10 => ax.max(ay) <= 0.8 && ((u - v).abs() <= 0.26 || (u + v).abs() <= 0.26),
        11 => (0.45..=0.75).contains(&ax.max(ay)),
        12 => ax + ay <= 0.85,
        13 => r <= 0.8 && (u - 0.35).powi(2) + v * v > 0.36,
        14 => {
            let theta = v.atan2(u);
            r <= 0.45 + 0.35 * (5.0 * theta).cos()
        }
        15 => (ay <= 0.15 && (-0.8..=0.2).contains(&u)) || ((0.1..=0.8).contains(&u) && ay <= (0.8 - u) * 0.8),
        16 => (u / 0.85).powi(2) + (v / 0.45).powi(2) <= 1.0,
        17 => [(-0.5f32, 0.45f32), (0.5, 0.45), (0.0, -0.45)]
            .iter()
            .any(|(cx, cy)| (u - cx).powi(2) + (v - cy).powi(2) <= 0.08),
        18 => ax <= 0.8 && (v - (0.5 - ax)).abs() <= 0.22,
        _ => (ax <= 0.8 && ay <= 0.8) && ((u + 0.35).abs() <= 0.15 || (u - 0.35).abs() <= 0.15 || ay >= 0.6),
    }
}
