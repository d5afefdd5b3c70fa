//! Procedural tampering data: synthetic scenes with per-region noise
//! signatures, the three manipulation types, answer-text labels and an
//! on-disk dataset format.
//!
//! Every scene is "photographed" by a camera that leaves two traces: white
//! noise whose variance differs per region, and a faint checkerboard
//! (±`cfa_amplitude` on alternating pixels, like a colour-filter-array
//! residue) with a fixed phase. Splicing pastes pixels from a different
//! camera (other noise level, opposite phase); copy-move shifts by an odd
//! offset, which flips the phase; removal fills with smooth local
//! statistics that carry no checkerboard and little noise.

mod dataset;
mod manip;
mod scene;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::stub::VocabError;
use crate::tensor::Tensor;

pub use dataset::{
    build_dataset, config_hash, load_mask, load_rgb, save_mask, save_rgb, DatasetManifest, Mix, Record, CONFIG_FILE,
    MANIFEST_FILE,
};
pub use manip::{gen_authentic, gen_copy_move, gen_remove, gen_sample, gen_splice, render_coc_text};
pub use scene::{gen_base_scene, Scene, Shape, ShapeRecord};

/// Placement attempts before a generator gives up.
pub const MAX_ATTEMPTS: usize = 100;

/// Generator stream: xoshiro256++ seeded through splitmix64.
pub type ForgeRng = Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> ForgeRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// One splitmix64 output step.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for sub-stream `stream` of `seed`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManipulationType {
    Splice,
    CopyMove,
    Remove,
    Authentic,
}

impl ManipulationType {
    pub const ALL: [ManipulationType; 4] = [
        ManipulationType::Splice,
        ManipulationType::CopyMove,
        ManipulationType::Remove,
        ManipulationType::Authentic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ManipulationType::Splice => "splice",
            ManipulationType::CopyMove => "copy-move",
            ManipulationType::Remove => "remove",
            ManipulationType::Authentic => "authentic",
        }
    }

    pub fn label(self) -> Label {
        match self {
            ManipulationType::Authentic => Label::Real,
            _ => Label::Fake,
        }
    }
}

impl fmt::Display for ManipulationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ManipulationType {
    type Err = ForgeError;
    fn from_str(s: &str) -> Result<Self> {
        ManipulationType::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ForgeError::InvalidConfig(format!("unknown manipulation type {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Real,
    Fake,
}

/// One generated example. `image` is `[3, h, w]` in `[0, 1]`, `mask` is
/// `[h, w]` with values 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub label: Label,
    pub manip: ManipulationType,
    pub text: crate::stub::TokenSequence,
    pub seed: u64,
}

impl ImageSample {
    pub fn mask_area(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.5).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgeConfig {
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Half-extent range of scene shapes, in pixels.
    pub shape_radius: (f64, f64),
    /// Range the per-region noise variance is drawn from.
    pub noise_var: (f64, f64),
    /// Minimum |donor variance − host background variance| for splices.
    pub splice_var_margin: f64,
    /// Allowed tampered area as a fraction of the image.
    pub area_frac: (f64, f64),
    pub cfa_amplitude: f64,
    /// Fill noise std relative to the sampled surroundings, for removals.
    pub remove_noise_ratio: f64,
    /// Blend splice borders over one pixel.
    pub feather: bool,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            image_size: 64,
            min_shapes: 2,
            max_shapes: 5,
            shape_radius: (5.0, 14.0),
            noise_var: (1e-4, 2.5e-3),
            splice_var_margin: 1e-3,
            area_frac: (0.02, 0.25),
            cfa_amplitude: 0.03,
            remove_noise_ratio: 0.25,
            feather: false,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ForgeError::InvalidConfig(m));
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return bad(format!("image_size {} must be a positive multiple of 8", self.image_size));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes || self.max_shapes > 255 {
            return bad(format!("shape count range {}..={} must be non-empty within 1..=255", self.min_shapes, self.max_shapes));
        }
        let (r0, r1) = self.shape_radius;
        if !(r0 >= 1.0 && r0 <= r1) {
            return bad(format!("shape_radius ({r0}, {r1}) must satisfy 1 <= lo <= hi"));
        }
        let (v0, v1) = self.noise_var;
        if !(v0 >= 0.0 && v0 <= v1 && v1 < 0.1) {
            return bad(format!("noise_var ({v0}, {v1}) must satisfy 0 <= lo <= hi < 0.1"));
        }
        // Some donor variance must clear the margin for every host draw.
        if !(self.splice_var_margin >= 0.0 && self.splice_var_margin <= (v1 - v0) / 2.0) {
            return bad(format!(
                "splice_var_margin {} must lie in [0, (hi - lo) / 2 = {}]",
                self.splice_var_margin,
                (v1 - v0) / 2.0
            ));
        }
        let (a0, a1) = self.area_frac;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return bad(format!("area_frac ({a0}, {a1}) must satisfy 0 < lo <= hi <= 1"));
        }
        if !(self.cfa_amplitude >= 0.0 && self.cfa_amplitude < 0.2) {
            return bad(format!("cfa_amplitude {} must lie in [0, 0.2)", self.cfa_amplitude));
        }
        if !(self.remove_noise_ratio >= 0.0 && self.remove_noise_ratio.is_finite()) {
            return bad(format!("remove_noise_ratio {} must be non-negative", self.remove_noise_ratio));
        }
        Ok(())
    }

    fn area_ok(&self, pixels: usize) -> bool {
        let f = pixels as f64 / (self.image_size * self.image_size) as f64;
        f >= self.area_frac.0 && f <= self.area_frac.1
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error("{manip}: no placement found after {MAX_ATTEMPTS} attempts ({constraint})")]
    Placement {
        manip: ManipulationType,
        constraint: &'static str,
    },
    #[error("invalid mix: {0}")]
    InvalidMix(String),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}:{line}: {reason}")]
    Manifest { path: PathBuf, line: usize, reason: String },
    #[error("config hash mismatch: dataset.cfg records {recorded:#018x}, contents hash to {computed:#018x}")]
    HashMismatch { recorded: u64, computed: u64 },
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub type Result<T> = std::result::Result<T, ForgeError>;
