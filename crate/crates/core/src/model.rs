//! Full detector: trace encoder, frozen content backbone, language stub and
//! mask decoder wired together, plus the per-sample loss.

use crate::backbone::{BackboneConfig, ContentBackbone, ContentFeatureMap};
use crate::decoder::{DecoderConfig, DecoderKind, FusionDecoder};
use crate::losses::{mask_loss, text_loss, total_loss, LossWeights};
use crate::nn::{Graph, ParamInit, ParamStore, PatchGrid};
use crate::stub::{decode_text, HiddenStates, MllmStub, PromptSpec, StubConfig, TokenSequence, Vocabulary};
use crate::tensor::{Real, Result, Tensor, TensorError, Var};
use crate::trace::{TraceEncoder, TraceEncoderConfig, TraceFeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    Enabled,
    /// Ablation: the decoder's trace input is all zeros and the encoder is
    /// never run.
    Zeroed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub trace_blocks: usize,
    pub backbone_blocks: usize,
    pub lifted_channels: usize,
    pub constrained_mid: usize,
    pub d_llm: usize,
    pub prompt_dim: usize,
    pub stub_hidden: usize,
    pub aux_tokens: usize,
    pub decoder: DecoderKind,
    pub trace: TraceMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            dim: 64,
            heads: 4,
            mlp_hidden: 128,
            trace_blocks: 4,
            backbone_blocks: 4,
            lifted_channels: 16,
            constrained_mid: 3,
            d_llm: 128,
            prompt_dim: 32,
            stub_hidden: 128,
            aux_tokens: 3,
            decoder: DecoderKind::Fusion,
            trace: TraceMode::Enabled,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::for_image(self.image_size, self.image_size, self.patch_size, self.dim)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub prompt: PromptSpec,
    pub trace: TraceEncoder,
    pub backbone: ContentBackbone,
    pub stub: MllmStub,
    pub decoder: FusionDecoder,
}

pub const BACKBONE_SCOPE: &str = "backbone";

/// Inference result: per-pixel tampering probability `[h, w]` and the
/// greedy answer text.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask_prob: Tensor<f32>,
    pub text: TokenSequence,
}

/// Everything a forward pass produces for one image.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub token_logits: Var,
    pub hidden: HiddenStates,
    pub seg: Var,
    pub mask_logits: Var,
}

impl Model {
    /// Builds the model and its parameters (in 64-bit) from `seed`. The
    /// backbone draws from its own fixed seed.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<(Model, ParamStore<f64>)> {
        let grid = cfg.grid()?;
        let vocab = Vocabulary::default();
        let prompt = PromptSpec::default_for(&vocab);
        let mut init = ParamInit::new(seed);
        let backbone = ContentBackbone::new(
            &mut init,
            BACKBONE_SCOPE,
            &BackboneConfig {
                image_size: cfg.image_size,
                patch_size: cfg.patch_size,
                dim: cfg.dim,
                heads: cfg.heads,
                mlp_hidden: cfg.mlp_hidden,
                blocks: cfg.backbone_blocks,
            },
        )?;
        let trace = TraceEncoder::new(
            &mut init,
            "trace",
            TraceEncoderConfig {
                image_size: cfg.image_size,
                patch_size: cfg.patch_size,
                dim: cfg.dim,
                heads: cfg.heads,
                mlp_hidden: cfg.mlp_hidden,
                blocks: cfg.trace_blocks,
                lifted_channels: cfg.lifted_channels,
                constrained_mid: cfg.constrained_mid,
            },
        )?;
        let stub = MllmStub::new(
            &mut init,
            "stub",
            StubConfig {
                content_dim: cfg.dim,
                prompt_dim: cfg.prompt_dim,
                d_llm: cfg.d_llm,
                hidden: cfg.stub_hidden,
                d_dec: cfg.dim,
                vocab_size: vocab.len(),
            },
        );
        let decoder = FusionDecoder::new(
            &mut init,
            "decoder",
            DecoderConfig {
                grid,
                heads: cfg.heads,
                mlp_hidden: cfg.mlp_hidden,
                aux_tokens: cfg.aux_tokens,
                positional: true,
                kind: cfg.decoder,
            },
        )?;
        let mut store = init.finish();
        if cfg.trace == TraceMode::Zeroed {
            // Unused weights must not pick up optimizer state or updates.
            let prefix = "trace.";
            for id in store.ids().collect::<Vec<_>>() {
                if store.name(id).starts_with(prefix) {
                    store.get_mut(id).requires_grad = false;
                }
            }
        }
        let model = Model {
            cfg,
            vocab,
            prompt,
            trace,
            backbone,
            stub,
            decoder,
        };
        model.project_constraints(&mut store);
        Ok((model, store))
    }

    pub fn project_constraints<T: Real>(&self, store: &mut ParamStore<T>) {
        self.trace.project_constraints(store);
    }

    pub fn backbone_checksum<T: Real>(&self, store: &ParamStore<T>) -> u64 {
        self.backbone.checksum(store, BACKBONE_SCOPE)
    }

    pub fn check_image(&self, image: &Tensor<impl Real>) -> Result<()> {
        let s = self.cfg.image_size;
        if image.shape() != [3, s, s] {
            return Err(TensorError::ShapeMismatch {
                op: "model",
                lhs: image.shape().to_vec(),
                rhs: vec![3, s, s],
            });
        }
        Ok(())
    }

    /// Content features for caching; the backbone never changes.
    pub fn content_features<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        self.backbone.encode_values(store, image)
    }

    /// Forward pass given the image and its cached content features.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: &Tensor<T>, content: &Tensor<T>) -> Result<Outputs> {
        self.check_image(image)?;
        let grid = self.cfg.grid()?;
        let f_c = ContentFeatureMap::from_tensor(g, content, grid)?;
        let f_t = match self.cfg.trace {
            TraceMode::Enabled => {
                let x = g.tape.constant(image.shape(), image.data().to_vec())?;
                self.trace.encode(g, x)?
            }
            TraceMode::Zeroed => {
                let z = g.tape.constant(&[grid.num_patches(), grid.embed_dim], vec![T::zero(); grid.num_patches() * grid.embed_dim])?;
                TraceFeatureMap { features: z, grid }
            }
        };
        let (hidden, token_logits) = self.stub.forward(g, &f_c, &self.prompt)?;
        let seg = self.stub.seg_embedding(g, &hidden)?;
        let mask = self.decoder.decode_mask(g, &f_c, &f_t, &seg)?;
        Ok(Outputs {
            token_logits,
            hidden,
            seg: seg.embedding,
            mask_logits: mask.logits,
        })
    }

    pub fn predict(&self, store: &ParamStore<f32>, image: &Tensor<f32>) -> Result<Prediction> {
        let content = self.content_features(store, image)?;
        self.predict_with(store, image, &content)
    }

    /// [`Model::predict`] with precomputed content features.
    pub fn predict_with(&self, store: &ParamStore<f32>, image: &Tensor<f32>, content: &Tensor<f32>) -> Result<Prediction> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, image, content)?;
        let probs = g.tape.sigmoid(out.mask_logits);
        let s = self.cfg.image_size;
        Ok(Prediction {
            mask_prob: Tensor::new(&[s, s], g.tape.value(probs).to_vec())?,
            text: decode_text(g.tape.value(out.token_logits), self.vocab.len()),
        })
    }

    /// Per-sample objective; returns `(total, text, mask)`.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        out: &Outputs,
        target: &TokenSequence,
        gt_mask: &Tensor<T>,
        w: &LossWeights,
    ) -> Result<(Var, Var, Var)> {
        let txt = text_loss(&mut g.tape, out.token_logits, target)?;
        let gt = g.tape.constant(gt_mask.shape(), gt_mask.data().to_vec())?;
        let m = mask_loss(&mut g.tape, out.mask_logits, gt, w)?;
        let total = total_loss(&mut g.tape, txt, m, w)?;
        Ok((total, txt, m))
    }
}
