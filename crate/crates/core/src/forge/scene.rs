//! Base scenes: a smooth background gradient with a handful of flat shapes,
//! each region carrying white noise of its own variance.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{rng, ForgeConfig, ForgeRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Rect { cx: f64, cy: f64, hx: f64, hy: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    /// Whether the point (in pixel units) lies inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { cx, cy, hx, hy } => (x - cx).abs() <= hx && (y - cy).abs() <= hy,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (u, v) = ((x - cx) / rx, (y - cy) / ry);
                u * u + v * v <= 1.0
            }
            Shape::Triangle { pts } => {
                let cross = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [cross(pts[0], pts[1]), cross(pts[1], pts[2]), cross(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }

    /// Row-major coverage of pixel centres on a `size × size` grid.
    pub fn raster(&self, size: usize) -> Vec<bool> {
        let mut out = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                out[y * size + x] = self.contains(x as f64 + 0.5, y as f64 + 0.5);
            }
        }
        out
    }

    pub fn centre(&self) -> (f64, f64) {
        match *self {
            Shape::Rect { cx, cy, .. } | Shape::Ellipse { cx, cy, .. } => (cx, cy),
            Shape::Triangle { pts } => (
                (pts[0].0 + pts[1].0 + pts[2].0) / 3.0,
                (pts[0].1 + pts[1].1 + pts[2].1) / 3.0,
            ),
        }
    }

    /// Random shape with half-extent in `radius`, centred anywhere.
    pub(crate) fn random(rng: &mut ForgeRng, size: usize, radius: (f64, f64)) -> Shape {
        let kind = rng.gen_range(0..3u8);
        let cx = rng.gen_range(0.0..size as f64);
        let cy = rng.gen_range(0.0..size as f64);
        let mut r = || rng.gen_range(radius.0..=radius.1);
        match kind {
            0 => Shape::Rect {
                cx,
                cy,
                hx: r(),
                hy: r(),
            },
            1 => Shape::Ellipse {
                cx,
                cy,
                rx: r(),
                ry: r(),
            },
            _ => {
                let rad = r();
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let mut pts = [(0.0, 0.0); 3];
                for (i, p) in pts.iter_mut().enumerate() {
                    let t = phase + i as f64 * std::f64::consts::TAU / 3.0 + rng.gen_range(-0.3..0.3);
                    *p = (cx + rad * t.cos(), cy + rad * t.sin());
                }
                Shape::Triangle { pts }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRecord {
    pub shape: Shape,
    pub color: [f64; 3],
    pub noise_var: f64,
}

/// A rendered scene before any camera trace is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub size: usize,
    /// `[3, size, size]`.
    pub image: Tensor<f32>,
    /// Per pixel: 0 for background, `i + 1` for shape `i` (later shapes
    /// occlude earlier ones).
    pub owner: Vec<u8>,
    pub background_var: f64,
    pub shapes: Vec<ShapeRecord>,
}

impl Scene {
    /// Pixels where shape `i` is visible.
    pub fn visible(&self, i: usize) -> Vec<bool> {
        self.owner.iter().map(|&o| o as usize == i + 1).collect()
    }

    pub fn noise_var_at(&self, pixel: usize) -> f64 {
        match self.owner[pixel] {
            0 => self.background_var,
            o => self.shapes[o as usize - 1].noise_var,
        }
    }
}

/// Deterministic scene for `seed`.
pub fn gen_base_scene(cfg: &ForgeConfig, seed: u64) -> Scene {
    render(cfg, &mut rng(seed), None)
}

/// Draws and renders a scene; `noise_var` replaces every region's variance
/// (the draws still happen so the geometry matches the unforced scene).
pub(crate) fn render(cfg: &ForgeConfig, rng: &mut ForgeRng, noise_var: Option<f64>) -> Scene {
    let size = cfg.image_size;
    let var = |rng: &mut ForgeRng| {
        let v = rng.gen_range(cfg.noise_var.0..=cfg.noise_var.1);
        noise_var.unwrap_or(v)
    };
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.7));
    let grad: [(f64, f64); 3] = std::array::from_fn(|_| (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)));
    let background_var = var(rng);
    let n = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let shape = Shape::random(rng, size, cfg.shape_radius);
        let color = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
        shapes.push(ShapeRecord {
            shape,
            color,
            noise_var: var(rng),
        });
    }
    let mut owner = vec![0u8; size * size];
    for (i, s) in shapes.iter().enumerate() {
        for (o, inside) in owner.iter_mut().zip(s.shape.raster(size)) {
            if inside {
                *o = i as u8 + 1;
            }
        }
    }
    let mut scene = Scene {
        size,
        image: Tensor::zeros(&[3, size, size]),
        owner,
        background_var,
        shapes,
    };
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for c in 0..3 {
        for p in 0..plane {
            let (x, y) = ((p % size) as f64 + 0.5, (p / size) as f64 + 0.5);
            let clean = match scene.owner[p] {
                0 => base[c] + grad[c].0 * (x / size as f64 - 0.5) + grad[c].1 * (y / size as f64 - 0.5),
                o => scene.shapes[o as usize - 1].color[c],
            };
            let z: f64 = rng.sample(StandardNormal);
            data[c * plane + p] = (clean + scene.noise_var_at(p).sqrt() * z) as f32;
        }
    }
    scene.image = Tensor::new(&[3, size, size], data).expect("scene buffer matches its shape");
    scene
}

/// Adds the camera's checkerboard trace with the given phase (±1).
pub(crate) fn acquire(image: &mut [f32], size: usize, phase: f32, amplitude: f64) {
    let a = phase * amplitude as f32;
    for (i, v) in image.iter_mut().enumerate() {
        let p = i % (size * size);
        let (x, y) = (p % size, p / size);
        *v += if (x + y) % 2 == 0 { a } else { -a };
    }
}

pub(crate) fn clip01(image: &mut [f32]) {
    for v in image {
        *v = v.clamp(0.0, 1.0);
    }
}
