//! Frozen content backbone: a patch embedding and a short ViT stack whose
//! weights come from a fixed seed and never receive updates.

use crate::nn::{AttentionConfig, Graph, LayerNorm, ParamInit, ParamStore, PatchEmbed, PatchGrid, TransformerBlock};
use crate::tensor::{Real, Result, Tensor, Var};

pub const BACKBONE_SEED: u64 = 42;

/// Dense per-patch semantic embeddings.
#[derive(Debug, Clone, Copy)]
pub struct ContentFeatureMap {
    pub features: Var,
    pub grid: PatchGrid,
}

impl ContentFeatureMap {
    /// Places precomputed features on `g` as a constant.
    pub fn from_tensor<T: Real>(g: &mut Graph<'_, T>, features: &Tensor<T>, grid: PatchGrid) -> Result<Self> {
        let v = g.tape.constant(features.shape(), features.data().to_vec())?;
        Ok(ContentFeatureMap { features: v, grid })
    }
}

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone)]
pub struct ContentBackbone {
    pub patch: PatchEmbed,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl ContentBackbone {
    /// Builds the backbone from [`BACKBONE_SEED`] with every parameter
    /// frozen, independently of the caller's random stream.
    pub fn new(init: &mut ParamInit, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let grid = PatchGrid::for_image(cfg.image_size, cfg.image_size, cfg.patch_size, cfg.dim)?;
        let attn = AttentionConfig::new(cfg.dim, cfg.heads)?;
        init.set_trainable(false);
        let bb = init.with_seed(BACKBONE_SEED, |init| {
            init.scoped(name, |init| ContentBackbone {
                patch: PatchEmbed::new(init, "patch", 3, grid, true),
                blocks: (0..cfg.blocks)
                    .map(|i| TransformerBlock::new(init, &format!("block{i}"), attn, cfg.mlp_hidden))
                    .collect(),
                norm: LayerNorm::new(init, "norm", cfg.dim),
            })
        });
        init.set_trainable(true);
        Ok(bb)
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<ContentFeatureMap> {
        let mut x = self.patch.forward(g, image)?;
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        let x = self.norm.forward(g, x)?;
        Ok(ContentFeatureMap {
            features: x,
            grid: self.patch.grid,
        })
    }

    /// Runs the backbone on its own graph and returns the feature values,
    /// suitable for caching across training iterations.
    pub fn encode_values<T: Real>(&self, params: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(params);
        let x = g.tape.constant(image.shape(), image.data().to_vec())?;
        let f = self.encode(&mut g, x)?;
        Ok(g.tape.tensor(f.features).clone())
    }

    /// Checksum of the backbone weights inside `store`.
    pub fn checksum<T: Real>(&self, store: &ParamStore<T>, name: &str) -> u64 {
        let prefix = format!("{name}.");
        store.checksum(|n, _| n.starts_with(&prefix))
    }
}
