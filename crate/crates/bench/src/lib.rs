//! Deterministic inputs for the benchmarks.

use tamperlens_core::forge::{gen_sample, ForgeConfig, ImageSample, ManipulationType};
use tamperlens_core::tensor::Tensor;

/// A spliced 64x64 sample with its mask.
pub fn sample(seed: u64) -> ImageSample {
    gen_sample(&ForgeConfig::default(), ManipulationType::Splice, seed).expect("default config generates")
}

/// Row-major values in [-1, 1) from a fixed integer hash.
pub fn values(n: usize, seed: u64) -> Vec<f32> {
    (0..n as u64)
        .map(|i| {
            let h = (i + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            (h >> 40) as f32 / (1u64 << 23) as f32 - 1.0
        })
        .collect()
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::new(shape, values(shape.iter().product(), seed)).expect("length matches shape")
}
