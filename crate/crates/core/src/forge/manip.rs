//! The four sample generators and the answer-text template.

use rand::Rng;
use rand_distr::StandardNormal;

use super::scene::{acquire, clip01, render, Scene, Shape};
use super::{rng, sub_seed, ForgeConfig, ForgeError, ForgeRng, ImageSample, Label, ManipulationType, Result, MAX_ATTEMPTS};
use crate::stub::{TokenSequence, Vocabulary, EOS, FAKE, NONE, NOSEG, PAD, REAL, SEG};
use crate::tensor::Tensor;

/// Fixed five-slot answer for a sample of this type.
pub fn render_coc_text(manip: ManipulationType, vocab: &Vocabulary) -> Result<TokenSequence> {
    let text = match manip.label() {
        Label::Fake => format!("{FAKE} {manip} {SEG} {EOS} {PAD}"),
        Label::Real => format!("{REAL} {NONE} {NOSEG} {EOS} {PAD}"),
    };
    Ok(vocab.encode(&text)?)
}

pub fn gen_sample(cfg: &ForgeConfig, manip: ManipulationType, seed: u64) -> Result<ImageSample> {
    match manip {
        ManipulationType::Splice => gen_splice(cfg, seed),
        ManipulationType::CopyMove => gen_copy_move(cfg, seed),
        ManipulationType::Remove => gen_remove(cfg, seed),
        ManipulationType::Authentic => gen_authentic(cfg, seed),
    }
}

pub fn gen_authentic(cfg: &ForgeConfig, seed: u64) -> Result<ImageSample> {
    cfg.validate()?;
    let mut r = rng(seed);
    let img = photograph(cfg, &render(cfg, &mut r, None));
    let region = vec![false; cfg.image_size * cfg.image_size];
    finish(cfg, ManipulationType::Authentic, seed, img, &region)
}

/// Pastes a region from a donor scene shot by a camera with a different
/// noise level and the opposite checkerboard phase.
pub fn gen_splice(cfg: &ForgeConfig, seed: u64) -> Result<ImageSample> {
    cfg.validate()?;
    let manip = ManipulationType::Splice;
    let size = cfg.image_size;
    let mut r = rng(seed);
    let host = render(cfg, &mut r, None);
    let mut img = photograph(cfg, &host);
    let region = place(&mut r, manip, "region area within area_frac", |r| {
        let m = Shape::random(r, size, cfg.shape_radius).raster(size);
        cfg.area_ok(count(&m)).then_some(m)
    })?;
    let donor_var = place(&mut r, manip, "donor noise variance clears splice_var_margin", |r| {
        let v = r.gen_range(cfg.noise_var.0..=cfg.noise_var.1);
        ((v - host.background_var).abs() >= cfg.splice_var_margin).then_some(v)
    })?;
    let donor = render(cfg, &mut rng(sub_seed(seed, 1)), Some(donor_var));
    let mut donor_img = donor.image.into_data();
    acquire(&mut donor_img, size, -1.0, cfg.cfa_amplitude);
    let edge = if cfg.feather { boundary(&region, size) } else { vec![false; size * size] };
    let plane = size * size;
    for c in 0..3 {
        for p in (0..plane).filter(|&p| region[p]) {
            let i = c * plane + p;
            img[i] = if edge[p] { 0.5 * (img[i] + donor_img[i]) } else { donor_img[i] };
        }
    }
    finish(cfg, manip, seed, img, &region)
}

/// Duplicates a region of the image at a disjoint location; the offset has
/// odd parity so the copy's checkerboard phase is flipped.
pub fn gen_copy_move(cfg: &ForgeConfig, seed: u64) -> Result<ImageSample> {
    cfg.validate()?;
    let manip = ManipulationType::CopyMove;
    let size = cfg.image_size;
    let mut r = rng(seed);
    let scene = render(cfg, &mut r, None);
    let mut img = photograph(cfg, &scene);
    let (lo, hi) = ((2.0 * cfg.shape_radius.0) as usize, (2.0 * cfg.shape_radius.1) as usize);
    let hi = hi.min(size / 2).max(lo.max(1));
    let lo = lo.clamp(1, hi);
    let (src, dst, local) = place(&mut r, manip, "disjoint source/destination with area within area_frac", |r| {
        let (w, h) = (r.gen_range(lo..=hi), r.gen_range(lo..=hi));
        let ellipse = r.gen_bool(0.5);
        let local: Vec<bool> = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                if ellipse {
                    let (u, v) = (2.0 * x / w as f64 - 1.0, 2.0 * y / h as f64 - 1.0);
                    u * u + v * v <= 1.0
                } else {
                    true
                }
            })
            .collect();
        // Prefer copying an object when there is one.
        let (sx, sy) = if !scene.shapes.is_empty() && r.gen_bool(0.75) {
            let (cx, cy) = scene.shapes[r.gen_range(0..scene.shapes.len())].shape.centre();
            (clamp_origin(cx, w, size), clamp_origin(cy, h, size))
        } else {
            (r.gen_range(0..=size - w), r.gen_range(0..=size - h))
        };
        let (dx, dy) = (r.gen_range(0..=size - w), r.gen_range(0..=size - h));
        let odd = (sx + sy + dx + dy) % 2 == 1;
        let disjoint = sx + w <= dx || dx + w <= sx || sy + h <= dy || dy + h <= sy;
        (odd && disjoint && cfg.area_ok(count(&local))).then_some(((sx, sy, w, h), (dx, dy), local))
    })?;
    let (sx, sy, w, _) = src;
    let before = img.clone();
    let plane = size * size;
    let mut region = vec![false; plane];
    for (i, _) in local.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % w, i / w);
        let (s, d) = ((sy + y) * size + sx + x, (dst.1 + y) * size + dst.0 + x);
        region[d] = true;
        for c in 0..3 {
            img[c * plane + d] = before[c * plane + s];
        }
    }
    finish(cfg, manip, seed, img, &region)
}

/// Erases a shape by filling it with the mean of its surroundings plus a
/// fraction of their spread. The fill carries no checkerboard.
pub fn gen_remove(cfg: &ForgeConfig, seed: u64) -> Result<ImageSample> {
    cfg.validate()?;
    let manip = ManipulationType::Remove;
    let size = cfg.image_size;
    let mut r = rng(seed);
    let scene = render(cfg, &mut r, None);
    let mut img = photograph(cfg, &scene);
    let topmost = (0..scene.shapes.len()).rev().find_map(|i| {
        let m = dilate(&scene.visible(i), size);
        cfg.area_ok(count(&m)).then_some(m)
    });
    let region = match topmost {
        Some(m) => m,
        None => place(&mut r, manip, "region area within area_frac", |r| {
            let m = dilate(&Shape::random(r, size, cfg.shape_radius).raster(size), size);
            cfg.area_ok(count(&m)).then_some(m)
        })?,
    };
    let ring = surroundings(&region, &scene, size);
    let plane = size * size;
    for c in 0..3 {
        let vals: Vec<f64> = ring.iter().map(|&p| img[c * plane + p] as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64).sqrt();
        for p in (0..plane).filter(|&p| region[p]) {
            let z: f64 = r.sample(StandardNormal);
            img[c * plane + p] = (mean + cfg.remove_noise_ratio * sd * z) as f32;
        }
    }
    finish(cfg, manip, seed, img, &region)
}

fn photograph(cfg: &ForgeConfig, scene: &Scene) -> Vec<f32> {
    let mut img = scene.image.data().to_vec();
    acquire(&mut img, cfg.image_size, 1.0, cfg.cfa_amplitude);
    img
}

fn finish(cfg: &ForgeConfig, manip: ManipulationType, seed: u64, mut img: Vec<f32>, region: &[bool]) -> Result<ImageSample> {
    let s = cfg.image_size;
    clip01(&mut img);
    let mask = region.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Ok(ImageSample {
        image: Tensor::new(&[3, s, s], img).expect("image buffer matches its shape"),
        mask: Tensor::new(&[s, s], mask).expect("mask buffer matches its shape"),
        label: manip.label(),
        manip,
        text: render_coc_text(manip, &Vocabulary::default())?,
        seed,
    })
}

/// Rejection sampling with the fixed attempt cap.
fn place<T>(
    r: &mut ForgeRng,
    manip: ManipulationType,
    constraint: &'static str,
    mut attempt: impl FnMut(&mut ForgeRng) -> Option<T>,
) -> Result<T> {
    for _ in 0..MAX_ATTEMPTS {
        if let Some(v) = attempt(r) {
            return Ok(v);
        }
    }
    Err(ForgeError::Placement { manip, constraint })
}

fn count(m: &[bool]) -> usize {
    m.iter().filter(|&&b| b).count()
}

fn clamp_origin(centre: f64, extent: usize, size: usize) -> usize {
    let o = (centre - extent as f64 / 2.0).round().max(0.0) as usize;
    o.min(size - extent)
}

fn neighbours(p: usize, size: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (p % size, p / size);
    [(0isize, -1isize), (0, 1), (-1, 0), (1, 0)].into_iter().filter_map(move |(dx, dy)| {
        let (nx, ny) = (x as isize + dx, y as isize + dy);
        (nx >= 0 && ny >= 0 && (nx as usize) < size && (ny as usize) < size).then(|| ny as usize * size + nx as usize)
    })
}

/// One-pixel four-neighbour dilation.
fn dilate(m: &[bool], size: usize) -> Vec<bool> {
    (0..m.len()).map(|p| m[p] || neighbours(p, size).any(|q| m[q])).collect()
}

/// Region pixels with at least one four-neighbour outside.
fn boundary(m: &[bool], size: usize) -> Vec<bool> {
    (0..m.len()).map(|p| m[p] && neighbours(p, size).any(|q| !m[q])).collect()
}

/// Pixels within three steps of the region, outside it; background pixels
/// only when there are enough of them.
fn surroundings(region: &[bool], scene: &Scene, size: usize) -> Vec<usize> {
    let mut grown = region.to_vec();
    for _ in 0..3 {
        grown = dilate(&grown, size);
    }
    let ring: Vec<usize> = (0..region.len()).filter(|&p| grown[p] && !region[p]).collect();
    let bg: Vec<usize> = ring.iter().copied().filter(|&p| scene.owner[p] == 0).collect();
    if bg.len() >= 8 {
        bg
    } else if !ring.is_empty() {
        ring
    } else {
        (0..region.len()).filter(|&p| !region[p]).collect()
    }
}
