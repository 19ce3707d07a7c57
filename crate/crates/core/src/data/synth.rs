//! Seeded synthetic scenes: textured ore blobs and three base shape classes.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Scene;
use crate::eval::iou_unchecked;
use crate::tensor::RoiBox;

pub const ORE: u32 = 1;
pub const RECTANGLE: u32 = 2;
pub const TRIANGLE: u32 = 3;
pub const RING: u32 = 4;
pub const BASE_CLASSES: [u32; 3] = [RECTANGLE, TRIANGLE, RING];

pub fn class_name(id: u32) -> &'static str {
    match id {
        ORE => "ore",
        RECTANGLE => "rectangle",
        TRIANGLE => "triangle",
        RING => "ring",
        _ => "unknown",
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    /// Non-overlapping boxes.
    Sparse,
    /// Pairwise box IoU ≤ 0.4.
    #[default]
    Medium,
    /// Pairwise box IoU ≤ 0.6, more objects.
    Dense,
}

impl Density {
    pub fn max_iou(self) -> f64 {
        match self {
            Density::Sparse => 0.0,
            Density::Medium => 0.4,
            Density::Dense => 0.6,
        }
    }

    pub fn default_count(self) -> (usize, usize) {
        match self {
            Density::Sparse => (2, 5),
            Density::Medium => (4, 9),
            Density::Dense => (10, 18),
        }
    }
}

impl std::str::FromStr for Density {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sparse" => Ok(Self::Sparse),
            "medium" => Ok(Self::Medium),
            "dense" => Ok(Self::Dense),
            _ => Err(format!("unknown density {s:?} (expected sparse, medium or dense)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    pub density: Density,
    /// Classes drawn uniformly per object.
    pub classes: Vec<u32>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Nominal object radius range in pixels.
    pub radius: (f64, f64),
}

impl Default for SynthParams {
    fn default() -> Self {
        Self::new(Density::Medium, vec![ORE])
    }
}

impl SynthParams {
    pub fn new(density: Density, classes: Vec<u32>) -> Self {
        let (min_objects, max_objects) = density.default_count();
        let radius = if density == Density::Dense { (20.0, 40.0) } else { (22.0, 56.0) };
        Self { height: 320, width: 320, density, classes, min_objects, max_objects, radius }
    }
}

enum Shape {
    Polygon(Vec<(f64, f64)>),
    Ring { cx: f64, cy: f64, outer: f64, inner: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Polygon(pts) => {
                // convex, counter-clockwise in image coordinates
                let n = pts.len();
                (0..n).all(|i| {
                    let (ax, ay) = pts[i];
                    let (bx, by) = pts[(i + 1) % n];
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
                })
            }
            Shape::Ring { cx, cy, outer, inner } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 <= outer * outer && d2 >= inner * inner
            }
        }
    }

    fn extent(&self) -> (f64, f64, f64, f64) {
        match self {
            Shape::Polygon(pts) => pts.iter().fold((f64::MAX, f64::MAX, f64::MIN, f64::MIN), |a, &(x, y)| {
                (a.0.min(x), a.1.min(y), a.2.max(x), a.3.max(y))
            }),
            Shape::Ring { cx, cy, outer, .. } => (cx - outer, cy - outer, cx + outer, cy + outer),
        }
    }
}

/// Andrew's monotone chain; returns the hull counter-clockwise (y down).
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn make_shape(class: u32, cx: f64, cy: f64, r: f64, rng: &mut ChaCha8Rng) -> Shape {
    let rot = rng.random_range(0.0..std::f64::consts::TAU);
    let poly = |pts: Vec<(f64, f64)>| Shape::Polygon(convex_hull(pts));
    match class {
        ORE => {
            let n = rng.random_range(9..15);
            let (sx, sy) = (rng.random_range(0.75..1.0), rng.random_range(0.75..1.0));
            let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            angles.sort_by(f64::total_cmp);
            poly(
                angles
                    .iter()
                    .map(|&a| {
                        let rr = r * rng.random_range(0.8..1.0);
                        let (x, y) = (rr * a.cos() * sx, rr * a.sin() * sy);
                        (cx + x * rot.cos() - y * rot.sin(), cy + x * rot.sin() + y * rot.cos())
                    })
                    .collect(),
            )
        }
        RECTANGLE => {
            let (hw, hh) = (r * rng.random_range(0.6..1.0), r * rng.random_range(0.35..0.7));
            poly(
                [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
                    .iter()
                    .map(|&(x, y)| (cx + x * rot.cos() - y * rot.sin(), cy + x * rot.sin() + y * rot.cos()))
                    .collect(),
            )
        }
        TRIANGLE => poly(
            (0..3)
                .map(|k| {
                    let a = rot + k as f64 * std::f64::consts::TAU / 3.0;
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect(),
        ),
        _ => Shape::Ring { cx, cy, outer: r, inner: r * rng.random_range(0.45..0.7) },
    }
}

/// Smooth value noise on a coarse grid, bilinearly interpolated.
struct ValueNoise {
    grid: Vec<f64>,
    gw: usize,
    cell: f64,
}

impl ValueNoise {
    fn new(width: usize, height: usize, cell: f64, rng: &mut ChaCha8Rng) -> Self {
        let gw = (width as f64 / cell).ceil() as usize + 2;
        let gh = (height as f64 / cell).ceil() as usize + 2;
        Self { grid: (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect(), gw, cell }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x / self.cell, y / self.cell);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let g = |i: usize, j: usize| self.grid[j * self.gw + i];
        let top = g(x0, y0) * (1.0 - tx) + g(x0 + 1, y0) * tx;
        let bottom = g(x0, y0 + 1) * (1.0 - tx) + g(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

struct Texture {
    base: [f64; 3],
    pattern: u32,
    phase: f64,
    freq: f64,
}

fn class_texture(class: u32, rng: &mut ChaCha8Rng) -> Texture {
    let j = |rng: &mut ChaCha8Rng, v: f64| (v + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0);
    let base = match class {
        ORE => {
            let l = rng.random_range(0.5..0.75);
            [j(rng, l * 1.05), j(rng, l * 0.92), j(rng, l * 0.78)]
        }
        RECTANGLE => [j(rng, 0.25), j(rng, 0.55), j(rng, 0.8)],
        TRIANGLE => [j(rng, 0.85), j(rng, 0.75), j(rng, 0.2)],
        _ => [j(rng, 0.8), j(rng, 0.3), j(rng, 0.45)],
    };
    Texture { base, pattern: class, phase: rng.random_range(0.0..std::f64::consts::TAU), freq: rng.random_range(0.25..0.5) }
}

fn shade(t: &Texture, shape: &Shape, x: f64, y: f64, fine: &ValueNoise, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let m = match (t.pattern, shape) {
        (ORE, Shape::Polygon(pts)) => {
            let n = pts.len() as f64;
            let (cx, cy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
            let r = pts.iter().map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()).fold(1.0, f64::max);
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() / r;
            (1.0 - 0.45 * d * d) * (1.0 + 0.25 * fine.at(x, y)) + rng.random_range(-0.08..0.08)
        }
        (RECTANGLE, _) => 0.8 + 0.2 * ((x + y) * t.freq + t.phase).sin().signum(),
        (TRIANGLE, _) => 0.85 + 0.15 * ((x * t.freq).sin() * (y * t.freq + t.phase).sin()).signum(),
        _ => 0.9 + rng.random_range(-0.05..0.05),
    };
    t.base.map(|c| (c * m).clamp(0.0, 1.0))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders one scene. Identical `(seed, params)` give identical pixels and boxes.
pub fn synth_scene(seed: u64, params: &SynthParams) -> Scene {
    let (h, w) = (params.height.max(64), params.width.max(64));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let coarse = ValueNoise::new(w, h, 80.0, &mut rng);
    let fine = ValueNoise::new(w, h, 6.0, &mut rng);
    let tint = [rng.random_range(0.28..0.4), rng.random_range(0.26..0.36), rng.random_range(0.22..0.32)];
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let v = 1.0 + 0.25 * coarse.at(fx, fy) + 0.1 * fine.at(fx, fy) + rng.random_range(-0.05..0.05);
            img.put_pixel(x as u32, y as u32, Rgb(tint.map(|c| to_u8(c * v))));
        }
    }

    let target = rng.random_range(params.min_objects..=params.max_objects.max(params.min_objects));
    let classes = if params.classes.is_empty() { vec![ORE] } else { params.classes.clone() };
    let mut boxes: Vec<RoiBox> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    let max_iou = params.density.max_iou();
    let mut attempts = 0;
    while boxes.len() < target && attempts < 4000 {
        attempts += 1;
        // shrink gradually when space runs out so the count target is met
        let shrink = 1.0 - 0.5 * (attempts as f64 / 4000.0);
        let class = classes[rng.random_range(0..classes.len())];
        let r = rng.random_range(params.radius.0..params.radius.1.max(params.radius.0 + 1e-3)) * shrink;
        let (cx, cy) = (rng.random_range(r..(w as f64 - r).max(r + 1.0)), rng.random_range(r..(h as f64 - r).max(r + 1.0)));
        let shape = make_shape(class, cx, cy, r, &mut rng);
        let (ex0, ey0, ex1, ey1) = shape.extent();
        let (x0, y0) = (ex0.floor().max(0.0) as usize, ey0.floor().max(0.0) as usize);
        let (x1, y1) = ((ex1.ceil() as usize).min(w), (ey1.ceil() as usize).min(h));
        let mut cover = Vec::new();
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
        for y in y0..y1 {
            for x in x0..x1 {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    cover.push((x, y));
                    bx0 = bx0.min(x);
                    by0 = by0.min(y);
                    bx1 = bx1.max(x + 1);
                    by1 = by1.max(y + 1);
                }
            }
        }
        if cover.len() < 16 {
            continue;
        }
        let b = RoiBox::new(bx0 as f32, by0 as f32, bx1 as f32, by1 as f32);
        let ok = boxes.iter().all(|o| {
            if max_iou == 0.0 {
                // keep a one-pixel gap so boxes never touch
                b.x2 < o.x1 || o.x2 < b.x1 || b.y2 < o.y1 || o.y2 < b.y1
            } else {
                iou_unchecked(&b, o) <= max_iou
            }
        });
        if !ok {
            continue;
        }
        let tex = class_texture(class, &mut rng);
        let edge = rng.random_range(0.55..0.75);
        for &(x, y) in &cover {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut c = shade(&tex, &shape, fx, fy, &fine, &mut rng);
            let near_edge = [(-1.5, 0.0), (1.5, 0.0), (0.0, -1.5), (0.0, 1.5)].iter().any(|&(dx, dy)| !shape.contains(fx + dx, fy + dy));
            if near_edge {
                c = c.map(|v| v * edge);
            }
            img.put_pixel(x as u32, y as u32, Rgb(c.map(to_u8)));
        }
        boxes.push(b);
        labels.push(class);
    }
    Scene { image: img, boxes, classes: labels, seed }
}
