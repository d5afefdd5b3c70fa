//! On-disk datasets: PNG images and masks, a line-delimited JSON manifest,
//! and a canonical `key = value` config whose FNV-1a hash ties the two
//! together.

use std::fs;
use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fnv::FnvHasher;
use image::{GrayImage, ImageFormat, RgbImage};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{gen_sample, rng, sub_seed, ForgeConfig, ForgeError, Label, ManipulationType, Result};
use crate::stub::Vocabulary;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "dataset.cfg";
const HASH_KEY: &str = "config_hash";

/// Fractions of each manipulation type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mix {
    pub splice: f64,
    pub copy_move: f64,
    pub remove: f64,
    pub authentic: f64,
}

impl Default for Mix {
    fn default() -> Self {
        Mix {
            splice: 0.25,
            copy_move: 0.25,
            remove: 0.25,
            authentic: 0.25,
        }
    }
}

impl Mix {
    pub fn fractions(&self) -> [f64; 4] {
        [self.splice, self.copy_move, self.remove, self.authentic]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if let Some(bad) = f.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(ForgeError::InvalidMix(format!("fraction {bad} must be finite and non-negative")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ForgeError::InvalidMix(format!(
                "fractions {}/{}/{}/{} sum to {sum}, expected 1",
                f[0], f[1], f[2], f[3]
            )));
        }
        Ok(())
    }

    /// Per-type counts for `n` samples by largest remainder; ties go to the
    /// earlier type (splice, copy-move, remove, authentic).
    pub fn counts(&self, n: usize) -> Result<[usize; 4]> {
        self.validate()?;
        let raw = self.fractions().map(|f| f * n as f64);
        let mut counts = raw.map(|r| r.floor() as usize);
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        let short = n.saturating_sub(counts.iter().sum());
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        Ok(counts)
    }
}

/// `splice,copy-move,remove,authentic` fractions, comma-separated.
impl FromStr for Mix {
    type Err = ForgeError;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| ForgeError::InvalidMix(format!("{s:?}: {e}")))?;
        let [splice, copy_move, remove, authentic] = parts[..] else {
            return Err(ForgeError::InvalidMix(format!(
                "{s:?}: expected four comma-separated fractions (splice,copy-move,remove,authentic)"
            )));
        };
        let mix = Mix {
            splice,
            copy_move,
            remove,
            authentic,
        };
        mix.validate()?;
        Ok(mix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub image: String,
    pub mask: String,
    pub label: Label,
    pub manip: ManipulationType,
    pub text: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub config_hash: u64,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    /// Reads a dataset directory, checking the config hash and that every
    /// referenced file exists.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let cfg_path = root.join(CONFIG_FILE);
        let cfg_text = read(&cfg_path)?;
        let mut body = String::new();
        let mut recorded = None;
        for (i, line) in cfg_text.lines().enumerate() {
            match line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
                Some((HASH_KEY, v)) => {
                    let hex = v.trim_start_matches("0x");
                    recorded = Some(u64::from_str_radix(hex, 16).map_err(|e| ForgeError::Manifest {
                        path: cfg_path.clone(),
                        line: i + 1,
                        reason: format!("bad hash {v:?}: {e}"),
                    })?);
                }
                _ => {
                    body.push_str(line);
                    body.push('\n');
                }
            }
        }
        let recorded = recorded.ok_or_else(|| ForgeError::Manifest {
            path: cfg_path.clone(),
            line: 0,
            reason: format!("missing {HASH_KEY}"),
        })?;
        let computed = config_hash(&body);
        if computed != recorded {
            return Err(ForgeError::HashMismatch { recorded, computed });
        }
        let man_path = root.join(MANIFEST_FILE);
        let mut records = Vec::new();
        for (i, line) in read(&man_path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| ForgeError::Manifest {
                path: man_path.clone(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            for p in [&rec.image, &rec.mask] {
                if !root.join(p).is_file() {
                    return Err(ForgeError::Manifest {
                        path: man_path.clone(),
                        line: i + 1,
                        reason: format!("referenced file {p} does not exist"),
                    });
                }
            }
            records.push(rec);
        }
        Ok(DatasetManifest {
            root,
            config_hash: recorded,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Image `[3, h, w]` and mask `[h, w]` of record `i`, as stored.
    pub fn load_pair(&self, i: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let r = &self.records[i];
        Ok((load_rgb(self.root.join(&r.image))?, load_mask(self.root.join(&r.mask))?))
    }

    /// A copy restricted to records `range`, sharing the same root.
    pub fn subset(&self, range: std::ops::Range<usize>) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            config_hash: self.config_hash,
            records: self.records[range].to_vec(),
        }
    }
}

/// 64-bit FNV-1a over the bytes of `text`.
pub fn config_hash(text: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(text.as_bytes());
    h.finish()
}

fn canonical_config(cfg: &ForgeConfig, n: usize, mix: &Mix, seed: u64) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
    kv("n", n.to_string());
    kv("seed", seed.to_string());
    kv("mix", format!("{:?},{:?},{:?},{:?}", mix.splice, mix.copy_move, mix.remove, mix.authentic));
    kv("image_size", cfg.image_size.to_string());
    kv("shapes", format!("{},{}", cfg.min_shapes, cfg.max_shapes));
    kv("shape_radius", format!("{:?},{:?}", cfg.shape_radius.0, cfg.shape_radius.1));
    kv("noise_var", format!("{:?},{:?}", cfg.noise_var.0, cfg.noise_var.1));
    kv("splice_var_margin", format!("{:?}", cfg.splice_var_margin));
    kv("area_frac", format!("{:?},{:?}", cfg.area_frac.0, cfg.area_frac.1));
    kv("cfa_amplitude", format!("{:?}", cfg.cfa_amplitude));
    kv("remove_noise_ratio", format!("{:?}", cfg.remove_noise_ratio));
    kv("feather", cfg.feather.to_string());
    s
}

/// Generates `n` samples with exactly the mix's per-type counts (in a
/// seed-shuffled order) and writes them under `out`.
pub fn build_dataset(cfg: &ForgeConfig, n: usize, mix: &Mix, seed: u64, out: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let counts = mix.counts(n)?;
    let out = out.as_ref().to_path_buf();
    for dir in ["images", "masks"] {
        let d = out.join(dir);
        fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
    }
    let mut kinds: Vec<ManipulationType> = ManipulationType::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&m, c)| std::iter::repeat(m).take(c))
        .collect();
    kinds.shuffle(&mut rng(seed));
    let vocab = Vocabulary::default();
    let mut records = Vec::with_capacity(n);
    for (i, &manip) in kinds.iter().enumerate() {
        let s = sub_seed(seed, i as u64);
        let sample = gen_sample(cfg, manip, s)?;
        let image = format!("images/{i:05}.png");
        let mask = format!("masks/{i:05}.png");
        save_rgb(&sample.image, out.join(&image))?;
        save_mask(&sample.mask, out.join(&mask))?;
        records.push(Record {
            image,
            mask,
            label: sample.label,
            manip,
            text: vocab.decode(&sample.text)?,
            seed: s,
        });
    }
    let body = canonical_config(cfg, n, mix, seed);
    let hash = config_hash(&body);
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, format!("{body}{HASH_KEY} = {hash:#018x}\n")).map_err(|e| io(&cfg_path, e))?;
    let man_path = out.join(MANIFEST_FILE);
    let mut f = fs::File::create(&man_path).map_err(|e| io(&man_path, e))?;
    for r in &records {
        let line = serde_json::to_string(r).expect("records serialise");
        writeln!(f, "{line}").map_err(|e| io(&man_path, e))?;
    }
    Ok(DatasetManifest {
        root: out,
        config_hash: hash,
        records,
    })
}

fn io(path: &Path, source: std::io::Error) -> ForgeError {
    ForgeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io(path, e))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3, h, w]` image as 8-bit RGB PNG.
pub fn save_rgb(img: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [_, h, w] = img.shape()[..] else {
        return Err(ForgeError::InvalidConfig(format!("expected [3, h, w] image, got {:?}", img.shape())));
    };
    let plane = h * w;
    let d = img.data();
    let bytes: Vec<u8> = (0..plane).flat_map(|p| (0..3).map(move |c| to_u8(d[c * plane + p]))).collect();
    let buf = RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer length matches dimensions");
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| ForgeError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes an `[h, w]` mask as an 8-bit PNG (0 or 255).
pub fn save_mask(mask: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [h, w] = mask.shape()[..] else {
        return Err(ForgeError::InvalidConfig(format!("expected [h, w] mask, got {:?}", mask.shape())));
    };
    let bytes = mask.data().iter().map(|&m| if m >= 0.5 { 255 } else { 0 }).collect();
    let buf = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer length matches dimensions");
    buf.save_with_format(path, ImageFormat::Png).map_err(|e| ForgeError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| ForgeError::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Reads any 8-bit image as `[3, h, w]` in `[0, 1]`.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let img = open(path.as_ref())?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data).expect("buffer matches shape"))
}

/// Reads a mask; pixels at or above half intensity are 1.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let img = open(path.as_ref())?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::new(&[h, w], data).expect("buffer matches shape"))
}
