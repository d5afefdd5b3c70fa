//! Trace encoder: a noise-enhancement front end of constrained
//! convolutions plus a residual channel lift, followed by a small ViT.
//!
//! A constrained kernel has its center tap fixed to 1 and all taps summing
//! to 0, so it responds to local deviations from the neighbourhood and is
//! blind to flat content. The constraint is restored by
//! [`project_constraints`] after every optimizer step.

use crate::nn::{AttentionConfig, Graph, ParamId, ParamInit, ParamStore, PatchEmbed, PatchGrid, TransformerBlock};
use crate::tensor::{Real, Result, Tensor, TensorError, Var};

pub const KERNEL_SIZE: usize = 5;

/// Weights `[c_out, c_in, k, k]` of a constrained convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedKernel<T> {
    pub weights: Tensor<T>,
}

impl<T: Real> ConstrainedKernel<T> {
    pub fn new(weights: Tensor<T>) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 4 || s[2] != s[3] || s[2] % 2 == 0 {
            return Err(TensorError::InvalidArgument {
                op: "constrained_kernel",
                reason: format!("expected [c_out, c_in, k, k] with odd k, got {s:?}"),
            });
        }
        Ok(ConstrainedKernel { weights })
    }

    pub fn project_constraints(&self) -> Self {
        let mut w = self.weights.clone();
        let k = w.shape()[2];
        project_in_place(w.data_mut(), k);
        ConstrainedKernel { weights: w }
    }

    /// Largest violation over all slices of `|center − 1|` and `|Σ taps|`.
    pub fn max_violation(&self) -> f64 {
        let k = self.weights.shape()[2];
        max_violation(self.weights.data(), k)
    }
}

/// Applies the projection to every `k×k` slice of `data`: the center tap
/// becomes exactly 1 and the off-center taps are rescaled to sum to −1
/// (`t ← t · (−1/s)`); when their sum `s` is below 1e-8 in magnitude they
/// are set uniformly to `−1/(k²−1)`.
pub fn project_in_place<T: Real>(data: &mut [T], k: usize) {
    let taps = k * k;
    let center = taps / 2;
    for slice in data.chunks_exact_mut(taps) {
        let s: f64 = (0..taps).filter(|&i| i != center).map(|i| slice[i].as_f64()).sum();
        for i in (0..taps).filter(|&i| i != center) {
            let v = if s.abs() < 1e-8 {
                -1.0 / (taps - 1) as f64
            } else {
                slice[i].as_f64() * (-1.0 / s)
            };
            slice[i] = T::of(v);
        }
        // Rounding to T can leave the sum a few ulps of the largest tap off;
        // the smallest tap absorbs the residual with the finest resolution.
        let resid = -1.0 - (0..taps).filter(|&i| i != center).map(|i| slice[i].as_f64()).sum::<f64>();
        let j = (0..taps)
            .filter(|&i| i != center)
            .min_by(|&a, &b| slice[a].as_f64().abs().total_cmp(&slice[b].as_f64().abs()))
            .expect("kernel has off-center taps");
        slice[j] = T::of(slice[j].as_f64() + resid);
        slice[center] = T::one();
    }
}

pub fn max_violation<T: Real>(data: &[T], k: usize) -> f64 {
    let taps = k * k;
    data.chunks_exact(taps)
        .map(|s| {
            let total: f64 = s.iter().map(|v| v.as_f64()).sum();
            (s[taps / 2].as_f64() - 1.0).abs().max(total.abs())
        })
        .fold(0.0, f64::max)
}

/// Dense per-patch embeddings produced by the trace encoder.
#[derive(Debug, Clone, Copy)]
pub struct TraceFeatureMap {
    pub features: Var,
    pub grid: PatchGrid,
}

#[derive(Debug, Clone)]
pub struct TraceEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub blocks: usize,
    /// Channels after the residual lift (output of noise enhancement).
    pub lifted_channels: usize,
    /// Channels between the two constrained layers.
    pub constrained_mid: usize,
}

#[derive(Debug, Clone)]
pub struct TraceEncoder {
    pub cfg: TraceEncoderConfig,
    /// 1×1 residual projection `[lifted, 3, 1, 1]` and its bias.
    pub lift: ParamId,
    pub lift_bias: ParamId,
    pub constrained: [ParamId; 2],
    pub patch: PatchEmbed,
    pub blocks: Vec<TransformerBlock>,
    pub norm: crate::nn::LayerNorm,
}

impl TraceEncoder {
    pub fn new(init: &mut ParamInit, name: &str, cfg: TraceEncoderConfig) -> Result<Self> {
        let grid = PatchGrid::for_image(cfg.image_size, cfg.image_size, cfg.patch_size, cfg.dim)?;
        let attn = AttentionConfig::new(cfg.dim, cfg.heads)?;
        let (c, m, k) = (cfg.lifted_channels, cfg.constrained_mid, KERNEL_SIZE);
        Ok(init.scoped(name, |init| TraceEncoder {
            lift: init.normal("lift.weight", &[c, 3, 1, 1], (1.0f64 / 3.0).sqrt()),
            lift_bias: init.constant("lift.bias", &[c, 1, 1], 0.0),
            constrained: [
                init.normal("constrained1", &[m, 3, k, k], 0.1),
                init.normal("constrained2", &[c, m, k, k], 0.1),
            ],
            patch: PatchEmbed::new(init, "patch", c, grid, true),
            blocks: (0..cfg.blocks)
                .map(|i| TransformerBlock::new(init, &format!("block{i}"), attn, cfg.mlp_hidden))
                .collect(),
            norm: crate::nn::LayerNorm::new(init, "norm", cfg.dim),
            cfg,
        }))
    }

    /// Puts both constrained kernels in `store` onto the constraint set.
    pub fn project_constraints<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in self.constrained {
            project_in_place(store.get_mut(id).data_mut(), KERNEL_SIZE);
        }
    }

    pub fn constraint_violation<T: Real>(&self, store: &ParamStore<T>) -> f64 {
        self.constrained
            .iter()
            .map(|&id| max_violation(store.get(id).data(), KERNEL_SIZE))
            .fold(0.0, f64::max)
    }

    /// The two constrained layers with a tanh between them; no biases, so a
    /// constant image maps to exactly zero.
    pub fn constrained_response<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let pad = KERNEL_SIZE / 2;
        let k1 = g.param(self.constrained[0]);
        let h = g.tape.conv2d(image, k1, 1, pad)?;
        let h = g.tape.tanh(h);
        let k2 = g.param(self.constrained[1]);
        g.tape.conv2d(h, k2, 1, pad)
    }

    /// `lift(image) + constrained_response(image)`, shape `[c, h, w]`.
    pub fn noise_enhance<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let s = g.tape.shape(image);
        if s.len() != 3 || s[0] != 3 {
            return Err(TensorError::InvalidArgument {
                op: "noise_enhance",
                reason: format!("expected a [3, h, w] image, got {s:?}"),
            });
        }
        let lw = g.param(self.lift);
        let lb = g.param(self.lift_bias);
        let lifted = g.tape.conv2d(image, lw, 1, 0)?;
        let lifted = g.tape.add(lifted, lb)?;
        let residual = self.constrained_response(g, image)?;
        g.tape.add(lifted, residual)
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<TraceFeatureMap> {
        let noise = self.noise_enhance(g, image)?;
        let mut x = self.patch.forward(g, noise)?;
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        let x = self.norm.forward(g, x)?;
        Ok(TraceFeatureMap {
            features: x,
            grid: self.patch.grid,
        })
    }
}
