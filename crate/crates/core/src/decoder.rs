//! Mask decoder driven by the projected `[SEG]` embedding.
//!
//! Three fusion layers exchange information between a small token set and
//! a spatial embedding: the first against the trace features, the second
//! and third against the content features. Each layer runs four pre-norm
//! residual steps in a fixed order:
//!
//! 1. self-attention over the tokens
//! 2. tokens (queries) attend to the embedding
//! 3. MLP on the tokens
//! 4. embedding rows (queries) attend to the tokens
//!
//! Only the token stream crosses from the trace layer into the content
//! layers; the content embedding is carried from layer 2 into layer 3.

use std::fmt;

use crate::backbone::ContentFeatureMap;
use crate::nn::{dense_positional, Attention, AttentionConfig, Graph, LayerNorm, Mlp2, ParamId, ParamInit, PatchGrid};
use crate::stub::SegPromptEmbedding;
use crate::tensor::{Real, Result, TensorError, Var};
use crate::trace::TraceFeatureMap;

pub const FUSION_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Trace,
    Content,
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingKind::Trace => "trace",
            EmbeddingKind::Content => "content",
        })
    }
}

/// Embedding consumed by each fusion layer, in order.
pub const SCHEDULE: [EmbeddingKind; FUSION_LAYERS] =
    [EmbeddingKind::Trace, EmbeddingKind::Content, EmbeddingKind::Content];

#[derive(Debug, Clone, Copy)]
pub struct FusionState {
    /// `[n_tok, d]`
    pub tokens: Var,
    /// `[n_patch, d]`
    pub embedding: Var,
    pub kind: EmbeddingKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Fusion,
    /// Ablation: one token→embedding cross-attention over `f_t + f_c`.
    SingleCrossAttention,
}

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    pub grid: PatchGrid,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub aux_tokens: usize,
    /// Learned positional tables; disabled only in tests.
    pub positional: bool,
    pub kind: DecoderKind,
}

#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_t2e_tok: LayerNorm,
    pub norm_t2e_emb: LayerNorm,
    pub t2e: Attention,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp2,
    pub norm_e2t_emb: LayerNorm,
    pub norm_e2t_tok: LayerNorm,
    pub e2t: Attention,
}

impl FusionLayer {
    pub fn new(init: &mut ParamInit, name: &str, cfg: AttentionConfig, mlp_hidden: usize) -> Self {
        let d = cfg.model_dim;
        init.scoped(name, |init| FusionLayer {
            norm_self: LayerNorm::new(init, "norm_self", d),
            self_attn: Attention::new(init, "self_attn", cfg),
            norm_t2e_tok: LayerNorm::new(init, "norm_t2e_tok", d),
            norm_t2e_emb: LayerNorm::new(init, "norm_t2e_emb", d),
            t2e: Attention::new(init, "t2e", cfg),
            norm_mlp: LayerNorm::new(init, "norm_mlp", d),
            mlp: Mlp2::new(init, "mlp", d, mlp_hidden, d),
            norm_e2t_emb: LayerNorm::new(init, "norm_e2t_emb", d),
            norm_e2t_tok: LayerNorm::new(init, "norm_e2t_tok", d),
            e2t: Attention::new(init, "e2t", cfg),
        })
    }

    /// Runs the four steps; `pos` is added to the spatial side of the
    /// attention in steps 2 and 4.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, s: FusionState, pos: Option<Var>, layer: usize) -> Result<FusionState> {
        let (nt, dt) = dims2(g, s.tokens, "fusion_layer")?;
        let (_, de) = dims2(g, s.embedding, "fusion_layer")?;
        if dt != de || nt == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "fusion_layer",
                lhs: g.tape.shape(s.tokens).to_vec(),
                rhs: g.tape.shape(s.embedding).to_vec(),
            });
        }
        let add_pos = |g: &mut Graph<'_, T>, x: Var| match pos {
            Some(p) => g.tape.add(x, p),
            None => Ok(x),
        };

        g.record(|| format!("layer{layer}:self_attn"));
        let n = self.norm_self.forward(g, s.tokens)?;
        let a = self.self_attn.cross(g, n, n)?;
        let t = g.tape.add(s.tokens, a)?;

        g.record(|| format!("layer{layer}:tokens_to_{}", s.kind));
        let q = self.norm_t2e_tok.forward(g, t)?;
        let v = self.norm_t2e_emb.forward(g, s.embedding)?;
        let k = add_pos(g, v)?;
        let a = self.t2e.forward(g, q, k, v)?;
        let t = g.tape.add(t, a)?;

        g.record(|| format!("layer{layer}:mlp"));
        let n = self.norm_mlp.forward(g, t)?;
        let m = self.mlp.forward(g, n)?;
        let t = g.tape.add(t, m)?;

        g.record(|| format!("layer{layer}:{}_to_tokens", s.kind));
        let q = self.norm_e2t_emb.forward(g, s.embedding)?;
        let q = add_pos(g, q)?;
        let kv = self.norm_e2t_tok.forward(g, t)?;
        let a = self.e2t.cross(g, q, kv)?;
        let e = g.tape.add(s.embedding, a)?;

        Ok(FusionState {
            tokens: t,
            embedding: e,
            kind: s.kind,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SingleCross {
    pub norm_tok: LayerNorm,
    pub norm_emb: LayerNorm,
    pub attn: Attention,
}

#[derive(Debug, Clone)]
pub struct MaskHead {
    pub up1: (ParamId, ParamId),
    pub up2: (ParamId, ParamId),
    pub stride1: usize,
    pub token_proj: Mlp2,
    pub norm_tok: LayerNorm,
    pub norm_emb: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct FusionDecoder {
    pub cfg: DecoderConfig,
    pub aux: Option<ParamId>,
    pub pos: Option<(ParamId, ParamId)>,
    pub layers: Vec<FusionLayer>,
    pub single: Option<SingleCross>,
    pub head: MaskHead,
}

/// Decoded mask logits `[h, w]` at image resolution.
#[derive(Debug, Clone, Copy)]
pub struct MaskLogits {
    pub logits: Var,
}

impl FusionDecoder {
    pub fn new(init: &mut ParamInit, name: &str, cfg: DecoderConfig) -> Result<Self> {
        let d = cfg.grid.embed_dim;
        let p = cfg.grid.patch_size;
        if p % 2 != 0 || d % 4 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "decoder",
                reason: format!("patch size {p} must be even and model dim {d} divisible by 4"),
            });
        }
        let attn = AttentionConfig::new(d, cfg.heads)?;
        let grid = cfg.grid;
        Ok(init.scoped(name, |init| {
            let aux = (cfg.aux_tokens > 0).then(|| init.normal("aux_tokens", &[cfg.aux_tokens, d], 1.0));
            let pos = cfg.positional.then(|| {
                (
                    init.normal("pos_rows", &[grid.grid_h, d], 0.1),
                    init.normal("pos_cols", &[grid.grid_w, d], 0.1),
                )
            });
            let (layers, single) = match cfg.kind {
                DecoderKind::Fusion => (
                    (0..FUSION_LAYERS)
                        .map(|i| FusionLayer::new(init, &format!("layer{i}"), attn, cfg.mlp_hidden))
                        .collect(),
                    None,
                ),
                DecoderKind::SingleCrossAttention => (
                    Vec::new(),
                    Some(init.scoped("single", |init| SingleCross {
                        norm_tok: LayerNorm::new(init, "norm_tok", d),
                        norm_emb: LayerNorm::new(init, "norm_emb", d),
                        attn: Attention::new(init, "attn", attn),
                    })),
                ),
            };
            let s1 = p / 2;
            let head = init.scoped("head", |init| MaskHead {
                up1: (
                    init.normal("up1.weight", &[d, d / 2, s1, s1], (1.0 / d as f64).sqrt()),
                    init.constant("up1.bias", &[d / 2, 1, 1], 0.0),
                ),
                up2: (
                    init.normal("up2.weight", &[d / 2, d / 4, 2, 2], (2.0 / d as f64).sqrt()),
                    init.constant("up2.bias", &[d / 4, 1, 1], 0.0),
                ),
                stride1: s1,
                token_proj: Mlp2::new(init, "token_proj", d, d, d / 4),
                norm_tok: LayerNorm::new(init, "norm_tok", d),
                norm_emb: LayerNorm::new(init, "norm_emb", d),
            });
            FusionDecoder {
                cfg,
                aux,
                pos,
                layers,
                single,
                head,
            }
        }))
    }

    fn initial_tokens<T: Real>(&self, g: &mut Graph<'_, T>, h_seg: &SegPromptEmbedding) -> Result<Var> {
        let d = self.cfg.grid.embed_dim;
        let s = g.tape.shape(h_seg.embedding).to_vec();
        if s != [1, d] {
            return Err(TensorError::ShapeMismatch {
                op: "decode_mask",
                lhs: s,
                rhs: vec![1, d],
            });
        }
        match self.aux {
            Some(a) => {
                let a = g.param(a);
                g.tape.concat(&[h_seg.embedding, a], 0)
            }
            None => Ok(h_seg.embedding),
        }
    }

    fn check_grid<T: Real>(&self, g: &Graph<'_, T>, f: Var, grid: &PatchGrid) -> Result<()> {
        let want = [self.cfg.grid.num_patches(), self.cfg.grid.embed_dim];
        if *grid != self.cfg.grid || g.tape.shape(f) != want {
            return Err(TensorError::ShapeMismatch {
                op: "decode_mask",
                lhs: g.tape.shape(f).to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }

    /// Final `(tokens, content embedding)` before the mask head.
    pub fn fuse<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        f_c: &ContentFeatureMap,
        f_t: &TraceFeatureMap,
        h_seg: &SegPromptEmbedding,
    ) -> Result<(Var, Var)> {
        self.check_grid(g, f_c.features, &f_c.grid)?;
        self.check_grid(g, f_t.features, &f_t.grid)?;
        let tokens = self.initial_tokens(g, h_seg)?;
        let pos = match self.pos {
            Some((r, c)) => Some(dense_positional(g, r, c, &self.cfg.grid)?),
            None => None,
        };
        if let Some(single) = &self.single {
            g.record(|| "single:tokens_to_fused".to_string());
            let fused = g.tape.add(f_t.features, f_c.features)?;
            let q = single.norm_tok.forward(g, tokens)?;
            let v = single.norm_emb.forward(g, fused)?;
            let k = match pos {
                Some(p) => g.tape.add(v, p)?,
                None => v,
            };
            let a = single.attn.forward(g, q, k, v)?;
            let t = g.tape.add(tokens, a)?;
            return Ok((t, fused));
        }
        let mut tokens = tokens;
        let mut content = f_c.features;
        for (i, (layer, kind)) in self.layers.iter().zip(SCHEDULE).enumerate() {
            let embedding = match kind {
                EmbeddingKind::Trace => f_t.features,
                EmbeddingKind::Content => content,
            };
            let out = layer.forward(g, FusionState { tokens, embedding, kind }, pos, i)?;
            tokens = out.tokens;
            if kind == EmbeddingKind::Content {
                content = out.embedding;
            }
        }
        Ok((tokens, content))
    }

    /// Per-pixel dot product between the upsampled embedding and the
    /// projected seg token.
    pub fn mask_head<T: Real>(&self, g: &mut Graph<'_, T>, tokens: Var, embedding: Var) -> Result<MaskLogits> {
        let gr = self.cfg.grid;
        let d = gr.embed_dim;
        let h = &self.head;
        let e = h.norm_emb.forward(g, embedding)?;
        let e = g.tape.transpose(e, 0, 1)?;
        let e = g.tape.reshape(e, &[d, gr.grid_h, gr.grid_w])?;
        let w1 = g.param(h.up1.0);
        let b1 = g.param(h.up1.1);
        let u = g.tape.conv_transpose2d(e, w1, h.stride1)?;
        let u = g.tape.add(u, b1)?;
        let u = g.tape.gelu(u);
        let w2 = g.param(h.up2.0);
        let b2 = g.param(h.up2.1);
        let u = g.tape.conv_transpose2d(u, w2, 2)?;
        let u = g.tape.add(u, b2)?;
        let u = g.tape.gelu(u);
        let (ih, iw) = (gr.grid_h * gr.patch_size, gr.grid_w * gr.patch_size);
        let u = g.tape.reshape(u, &[d / 4, ih * iw])?;
        let seg = g.tape.slice(tokens, 0, 0, 1)?;
        let seg = h.norm_tok.forward(g, seg)?;
        let w = h.token_proj.forward(g, seg)?;
        let m = g.tape.matmul(w, u)?;
        Ok(MaskLogits {
            logits: g.tape.reshape(m, &[ih, iw])?,
        })
    }

    pub fn decode_mask<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        f_c: &ContentFeatureMap,
        f_t: &TraceFeatureMap,
        h_seg: &SegPromptEmbedding,
    ) -> Result<MaskLogits> {
        let (t, e) = self.fuse(g, f_c, f_t, h_seg)?;
        self.mask_head(g, t, e)
    }
}

fn dims2<T: Real>(g: &Graph<'_, T>, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match *g.tape.shape(v) {
        [a, b] => Ok((a, b)),
        ref s => Err(TensorError::InvalidArgument {
            op,
            reason: format!("expected a rank-2 tensor, got {s:?}"),
        }),
    }
}
