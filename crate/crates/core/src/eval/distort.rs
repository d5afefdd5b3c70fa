//! Post-processing distortions used for robustness evaluation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{EvalError, Result};
use crate::forge::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distortion {
    None,
    /// Bilinear rescale by a factor in `(0, 1]`.
    Resize { scale: f64 },
    /// Gaussian blur with an odd kernel size `k >= 3`.
    GaussBlur { k: usize },
    /// Additive Gaussian noise, σ in 8-bit units.
    GaussNoise { sigma: f64 },
    /// Baseline JPEG round trip at quality `1..=100`.
    Jpeg { quality: u8 },
}

impl Distortion {
    /// The eight robustness settings, in table order.
    pub fn battery() -> [Distortion; 8] {
        [
            Distortion::Resize { scale: 0.78 },
            Distortion::Resize { scale: 0.25 },
            Distortion::GaussBlur { k: 3 },
            Distortion::GaussBlur { k: 15 },
            Distortion::GaussNoise { sigma: 3.0 },
            Distortion::GaussNoise { sigma: 15.0 },
            Distortion::Jpeg { quality: 100 },
            Distortion::Jpeg { quality: 50 },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EvalError::InvalidDistortion(m));
        match *self {
            Distortion::None => Ok(()),
            Distortion::Resize { scale } if !(scale > 0.0 && scale <= 1.0) => bad(format!("resize scale {scale} must lie in (0, 1]")),
            Distortion::GaussBlur { k } if k < 3 || k % 2 == 0 => bad(format!("blur kernel {k} must be odd and >= 3")),
            Distortion::GaussNoise { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => bad(format!("noise sigma {sigma} must be >= 0")),
            Distortion::Jpeg { quality } if !(1..=100).contains(&quality) => bad(format!("jpeg quality {quality} must lie in 1..=100")),
            _ => Ok(()),
        }
    }

    /// Row label in the robustness table.
    pub fn label(&self) -> String {
        match *self {
            Distortion::None => "None".into(),
            Distortion::Resize { scale } => format!("Resize ({scale}x)"),
            Distortion::GaussBlur { k } => format!("GSBr (k={k})"),
            Distortion::GaussNoise { sigma } => format!("GSN (sigma={sigma})"),
            Distortion::Jpeg { quality } => format!("JPEG (q={quality})"),
        }
    }

    /// Blur σ for kernel size `k`: `0.3·((k − 1)/2 − 1) + 0.8`.
    pub fn blur_sigma(k: usize) -> f64 {
        0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8
    }
}

/// `none`, `resize:<scale>`, `blur:<k>`, `noise:<sigma>`, `jpeg:<quality>`.
impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Distortion::None => write!(f, "none"),
            Distortion::Resize { scale } => write!(f, "resize:{scale}"),
            Distortion::GaussBlur { k } => write!(f, "blur:{k}"),
            Distortion::GaussNoise { sigma } => write!(f, "noise:{sigma}"),
            Distortion::Jpeg { quality } => write!(f, "jpeg:{quality}"),
        }
    }
}

impl FromStr for Distortion {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: String| EvalError::InvalidDistortion(format!("{s:?}: {why}"));
        let (kind, arg) = match s.trim().split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s.trim(), None),
        };
        let need = || arg.ok_or_else(|| bad(format!("{kind} needs a parameter, e.g. {kind}:<value>")));
        let d = match kind {
            "none" => Distortion::None,
            "resize" => Distortion::Resize {
                scale: need()?.parse().map_err(|e| bad(format!("{e}")))?,
            },
            "blur" => Distortion::GaussBlur {
                k: need()?.parse().map_err(|e| bad(format!("{e}")))?,
            },
            "noise" => Distortion::GaussNoise {
                sigma: need()?.parse().map_err(|e| bad(format!("{e}")))?,
            },
            "jpeg" => Distortion::Jpeg {
                quality: need()?.parse().map_err(|e| bad(format!("{e}")))?,
            },
            _ => return Err(bad("expected none, resize:<s>, blur:<k>, noise:<sigma> or jpeg:<q>".into())),
        };
        d.validate()?;
        Ok(d)
    }
}

/// Applies `spec` to a `[3, h, w]` image; `seed` drives the noise.
pub fn distort(image: &Tensor<f32>, spec: &Distortion, seed: u64) -> Result<Tensor<f32>> {
    spec.validate()?;
    let [c, h, w] = dims3(image)?;
    Ok(match *spec {
        Distortion::None => image.clone(),
        Distortion::Resize { scale } => {
            let (oh, ow) = scaled(h, w, scale);
            resize_bilinear(image, oh, ow)?
        }
        Distortion::GaussBlur { k } => gaussian_blur(image, k),
        Distortion::GaussNoise { sigma } => {
            let mut r = rng(seed);
            let s = sigma / 255.0;
            let data = image
                .data()
                .iter()
                .map(|&v| {
                    let z: f64 = r.sample(StandardNormal);
                    (v as f64 + s * z).clamp(0.0, 1.0) as f32
                })
                .collect();
            Tensor::new(&[c, h, w], data).expect("same shape")
        }
        Distortion::Jpeg { quality } => jpeg_roundtrip(image, quality)?,
    })
}

/// Ground truth matching [`distort`]: nearest-neighbour resize for
/// `Resize`, unchanged otherwise.
pub fn distort_mask(mask: &Tensor<f32>, spec: &Distortion) -> Result<Tensor<f32>> {
    spec.validate()?;
    match *spec {
        Distortion::Resize { scale } => {
            let [h, w] = dims2(mask)?;
            let (oh, ow) = scaled(h, w, scale);
            Ok(resize_nearest(mask, oh, ow))
        }
        _ => Ok(mask.clone()),
    }
}

fn dims3(t: &Tensor<f32>) -> Result<[usize; 3]> {
    match t.shape() {
        &[c, h, w] if h > 0 && w > 0 => Ok([c, h, w]),
        s => Err(EvalError::InvalidDistortion(format!("expected a [c, h, w] image, got {s:?}"))),
    }
}

fn dims2(t: &Tensor<f32>) -> Result<[usize; 2]> {
    match t.shape() {
        &[h, w] => Ok([h, w]),
        s => Err(EvalError::InvalidDistortion(format!("expected an [h, w] mask, got {s:?}"))),
    }
}

fn scaled(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let f = |n: usize| ((n as f64 * scale).round() as usize).max(1);
    (f(h), f(w))
}

/// Half-pixel-centre bilinear resampling of every channel of `[c, h, w]`
/// (or `[h, w]`) to `oh × ow`, clamping at the borders.
pub fn resize_bilinear(t: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let (c, h, w, shape): (usize, usize, usize, Vec<usize>) = match *t.shape() {
        [c, h, w] => (c, h, w, vec![c, oh, ow]),
        [h, w] => (1, h, w, vec![oh, ow]),
        ref s => return Err(EvalError::InvalidDistortion(format!("cannot resize shape {s:?}"))),
    };
    let src = t.data();
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = coord(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, fx) = coord(ox, w, ow);
                let at = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    Ok(Tensor::new(&shape, out).expect("resize buffer matches"))
}

/// Nearest-neighbour resize of an `[h, w]` map; output pixel `o` samples
/// input `floor((o + 0.5)·n_in / n_out)`.
pub fn resize_nearest(t: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let pick = |o: usize, n_in: usize, n_out: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let d = t.data();
    let out = (0..oh * ow).map(|i| d[pick(i / ow, h, oh) * w + pick(i % ow, w, ow)]).collect();
    Tensor::new(&[oh, ow], out).expect("resize buffer matches")
}

/// Separable Gaussian blur with reflect-101 borders.
fn gaussian_blur(t: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let sigma = Distortion::blur_sigma(k);
    let r = (k / 2) as isize;
    let mut kern: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kern.iter().sum();
    kern.iter_mut().for_each(|v| *v /= total);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let mut m = i.rem_euclid(period);
        if m >= n {
            m = period - m;
        }
        m as usize
    };
    let src = t.data();
    let mut out = vec![0f32; src.len()];
    let mut tmp = vec![0f64; h * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = (-r..=r)
                    .zip(&kern)
                    .map(|(d, kv)| kv * plane[y * w + reflect(x as isize + d, w)] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = (-r..=r).zip(&kern).map(|(d, kv)| kv * tmp[reflect(y as isize + d, h) * w + x]).sum();
                out[ch * h * w + y * w + x] = v as f32;
            }
        }
    }
    Tensor::new(&[c, h, w], out).expect("same shape")
}

const LUMA_Q: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51,
    87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA_Q: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99,
];

/// Quantisation table for `quality`: scale `5000/q` below 50, `200 − 2q`
/// otherwise, entries `floor((base·scale + 50)/100)` clamped to 1..=255.
pub fn quant_table(base: &[u16; 64], quality: u8) -> [u16; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    base.map(|b| ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16)
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0f64; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    c
}

/// Baseline JPEG encode/decode: 8-bit RGB to full-range YCbCr, 4:4:4,
/// 8×8 orthonormal DCT, quantisation with the standard tables, and back.
/// Entropy coding is lossless and therefore skipped.
fn jpeg_roundtrip(t: &Tensor<f32>, quality: u8) -> Result<Tensor<f32>> {
    let [c, h, w] = dims3(t)?;
    if c != 3 {
        return Err(EvalError::InvalidDistortion(format!("jpeg needs 3 channels, got {c}")));
    }
    let d = t.data();
    let plane = h * w;
    let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as f64;
    let mut ycc = vec![vec![0f64; plane]; 3];
    for p in 0..plane {
        let (r, g, b) = (byte(d[p]), byte(d[plane + p]), byte(d[2 * plane + p]));
        ycc[0][p] = 0.299 * r + 0.587 * g + 0.114 * b;
        ycc[1][p] = -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0;
        ycc[2][p] = 0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0;
    }
    let tables = [quant_table(&LUMA_Q, quality), quant_table(&CHROMA_Q, quality), quant_table(&CHROMA_Q, quality)];
    let basis = dct_basis();
    for (chan, table) in ycc.iter_mut().zip(&tables) {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                // edge-replicated block, level-shifted
                let mut blk = [[0f64; 8]; 8];
                for (y, row) in blk.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let (sy, sx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                        *v = chan[sy * w + sx] - 128.0;
                    }
                }
                let coef = dct2(&blk, &basis);
                let mut deq = [[0f64; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let q = table[u * 8 + v] as f64;
                        deq[u][v] = (coef[u][v] / q).round() * q;
                    }
                }
                let rec = idct2(&deq, &basis);
                for (y, row) in rec.iter().enumerate() {
                    for (x, &v) in row.iter().enumerate() {
                        if by + y < h && bx + x < w {
                            chan[(by + y) * w + bx + x] = v + 128.0;
                        }
                    }
                }
            }
        }
    }
    let mut out = vec![0f32; 3 * plane];
    for p in 0..plane {
        let (y, cb, cr) = (ycc[0][p], ycc[1][p] - 128.0, ycc[2][p] - 128.0);
        let rgb = [y + 1.402 * cr, y - 0.344_136 * cb - 0.714_136 * cr, y + 1.772 * cb];
        for (ch, v) in rgb.into_iter().enumerate() {
            out[ch * plane + p] = (v.round().clamp(0.0, 255.0) / 255.0) as f32;
        }
    }
    Ok(Tensor::new(&[3, h, w], out).expect("same shape"))
}

/// `F = C · f · Cᵀ` (rows index vertical frequency).
fn dct2(f: &[[f64; 8]; 8], c: &[[f64; 8]; 8]) -> [[f64; 8]; 8] {
    let mut tmp = [[0f64; 8]; 8];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u][x] = (0..8).map(|y| c[u][y] * f[y][x]).sum();
        }
    }
    let mut out = [[0f64; 8]; 8];
    for u in 0..8 {
        for v in 0..8 {
            out[u][v] = (0..8).map(|x| tmp[u][x] * c[v][x]).sum();
        }
    }
    out
}

/// `f = Cᵀ · F · C`.
fn idct2(f: &[[f64; 8]; 8], c: &[[f64; 8]; 8]) -> [[f64; 8]; 8] {
    let mut tmp = [[0f64; 8]; 8];
    for y in 0..8 {
        for v in 0..8 {
            tmp[y][v] = (0..8).map(|u| c[u][y] * f[u][v]).sum();
        }
    }
    let mut out = [[0f64; 8]; 8];
    for y in 0..8 {
        for x in 0..8 {
            out[y][x] = (0..8).map(|v| tmp[y][v] * c[v][x]).sum();
        }
    }
    out
}
