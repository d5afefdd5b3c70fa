use super::{Graph, ParamId, ParamInit};
use crate::tensor::{Real, Result, TensorError, Var};

/// Head layout of a multi-head attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || model_dim % num_heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                reason: format!("model_dim {model_dim} is not divisible by {num_heads} heads"),
            });
        }
        Ok(AttentionConfig { model_dim, num_heads })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Non-overlapping patch tiling of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub embed_dim: usize,
}

impl PatchGrid {
    pub fn for_image(height: usize, width: usize, patch_size: usize, embed_dim: usize) -> Result<Self> {
        if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
            return Err(TensorError::InvalidArgument {
                op: "patch_embed",
                reason: format!("image {height}x{width} is not divisible into {patch_size}x{patch_size} patches"),
            });
        }
        Ok(PatchGrid {
            patch_size,
            grid_h: height / patch_size,
            grid_w: width / patch_size,
            embed_dim,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut ParamInit, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        init.scoped(name, |init| Linear {
            weight: init.normal("weight", &[in_dim, out_dim], (1.0 / in_dim as f64).sqrt()),
            bias: bias.then(|| init.constant("bias", &[out_dim], 0.0)),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut ParamInit, name: &str, dim: usize) -> Self {
        init.scoped(name, |init| LayerNorm {
            gain: init.constant("gain", &[dim], 1.0),
            bias: init.constant("bias", &[dim], 0.0),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.tape.layer_norm(x, gain, bias)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp2 {
    pub fn new(init: &mut ParamInit, name: &str, in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        init.scoped(name, |init| Mlp2 {
            fc1: Linear::new(init, "fc1", in_dim, hidden_dim, true),
            fc2: Linear::new(init, "fc2", hidden_dim, out_dim, true),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention with input and output
/// projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Attention {
    pub fn new(init: &mut ParamInit, name: &str, cfg: AttentionConfig) -> Self {
        let d = cfg.model_dim;
        init.scoped(name, |init| Attention {
            cfg,
            q: Linear::new(init, "q", d, d, true),
            k: Linear::new(init, "k", d, d, true),
            v: Linear::new(init, "v", d, d, true),
            out: Linear::new(init, "out", d, d, true),
        })
    }

    /// Attends from `q_src[nq,d]` to `kv_src[nk,d]`.
    pub fn cross<T: Real>(&self, g: &mut Graph<'_, T>, q_src: Var, kv_src: Var) -> Result<Var> {
        self.forward(g, q_src, kv_src, kv_src)
    }

    /// Keys and values may come from differently encoded copies of the same
    /// rows (e.g. keys carrying positional information, values not).
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, q_src: Var, k_src: Var, v_src: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, q_src, k_src, v_src)?.0)
    }

    /// Also returns the attention matrix `[heads, nq, nk]`.
    pub fn forward_with_weights<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        q_src: Var,
        k_src: Var,
        v_src: Var,
    ) -> Result<(Var, Var)> {
        let d = self.cfg.model_dim;
        for src in [q_src, k_src, v_src] {
            let s = g.tape.shape(src);
            if s.len() != 2 || s[1] != d {
                return Err(TensorError::ShapeMismatch {
                    op: "attention",
                    lhs: s.to_vec(),
                    rhs: vec![d],
                });
            }
        }
        if g.tape.shape(k_src)[0] != g.tape.shape(v_src)[0] {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: g.tape.shape(k_src).to_vec(),
                rhs: g.tape.shape(v_src).to_vec(),
            });
        }
        let (h, hd) = (self.cfg.num_heads, self.cfg.head_dim());
        let nq = g.tape.shape(q_src)[0];
        let nk = g.tape.shape(k_src)[0];

        let q = self.q.forward(g, q_src)?;
        let q = g.tape.reshape(q, &[nq, h, hd])?;
        let q = g.tape.permute(q, &[1, 0, 2])?;
        let k = self.k.forward(g, k_src)?;
        let k = g.tape.reshape(k, &[nk, h, hd])?;
        let k = g.tape.permute(k, &[1, 2, 0])?;
        let v = self.v.forward(g, v_src)?;
        let v = g.tape.reshape(v, &[nk, h, hd])?;
        let v = g.tape.permute(v, &[1, 0, 2])?;

        let scores = g.tape.matmul(q, k)?;
        let scores = g.tape.mul_scalar(scores, T::of(1.0 / (hd as f64).sqrt()));
        let weights = g.tape.softmax(scores, 2)?;
        let o = g.tape.matmul(weights, v)?;
        let o = g.tape.permute(o, &[1, 0, 2])?;
        let o = g.tape.reshape(o, &[nq, d])?;
        Ok((self.out.forward(g, o)?, weights))
    }
}

/// Pre-norm transformer block: `x + attn(LN(x))`, then `x + mlp(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp2,
}

impl TransformerBlock {
    pub fn new(init: &mut ParamInit, name: &str, cfg: AttentionConfig, mlp_hidden: usize) -> Self {
        let d = cfg.model_dim;
        init.scoped(name, |init| TransformerBlock {
            norm1: LayerNorm::new(init, "norm1", d),
            attn: Attention::new(init, "attn", cfg),
            norm2: LayerNorm::new(init, "norm2", d),
            mlp: Mlp2::new(init, "mlp", d, mlp_hidden, d),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = self.norm1.forward(g, x)?;
        let a = self.attn.cross(g, n, n)?;
        let x = g.tape.add(x, a)?;
        let n = self.norm2.forward(g, x)?;
        let m = self.mlp.forward(g, n)?;
        g.tape.add(x, m)
    }
}

/// Learned 2-D positional table `row[i] + col[j]`, flattened row-major to
/// `[grid_h·grid_w, d]`.
pub fn dense_positional<T: Real>(g: &mut Graph<'_, T>, rows: ParamId, cols: ParamId, grid: &PatchGrid) -> Result<Var> {
    let d = grid.embed_dim;
    let r = g.param(rows);
    let c = g.param(cols);
    let r = g.tape.reshape(r, &[grid.grid_h, 1, d])?;
    let c = g.tape.reshape(c, &[1, grid.grid_w, d])?;
    let pe = g.tape.add(r, c)?;
    g.tape.reshape(pe, &[grid.num_patches(), d])
}

/// Flattens non-overlapping patches of a `[c,h,w]` image through a learned
/// linear map and optionally adds learned 2-D positional embeddings.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub grid: PatchGrid,
    pub channels: usize,
    pub proj: Linear,
    /// Row and column tables `[grid_h, d]`, `[grid_w, d]`.
    pub pos: Option<(ParamId, ParamId)>,
}

impl PatchEmbed {
    pub fn new(init: &mut ParamInit, name: &str, channels: usize, grid: PatchGrid, positional: bool) -> Self {
        let p = grid.patch_size;
        init.scoped(name, |init| PatchEmbed {
            grid,
            channels,
            proj: Linear::new(init, "proj", channels * p * p, grid.embed_dim, true),
            pos: positional.then(|| {
                (
                    init.normal("pos_rows", &[grid.grid_h, grid.embed_dim], 0.1),
                    init.normal("pos_cols", &[grid.grid_w, grid.embed_dim], 0.1),
                )
            }),
        })
    }

    /// Rearranges `[c,h,w]` into `[n_patches, c·p·p]`.
    pub fn patchify<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let s = g.tape.shape(image).to_vec();
        let gr = &self.grid;
        let p = gr.patch_size;
        if s.len() != 3 || s[0] != self.channels || s[1] != gr.grid_h * p || s[2] != gr.grid_w * p {
            return Err(TensorError::InvalidArgument {
                op: "patch_embed",
                reason: format!(
                    "expected [{}, {}, {}] image, got {s:?}",
                    self.channels,
                    gr.grid_h * p,
                    gr.grid_w * p
                ),
            });
        }
        let x = g.tape.reshape(image, &[s[0], gr.grid_h, p, gr.grid_w, p])?;
        let x = g.tape.permute(x, &[1, 3, 0, 2, 4])?;
        g.tape.reshape(x, &[gr.num_patches(), s[0] * p * p])
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let patches = self.patchify(g, image)?;
        let x = self.proj.forward(g, patches)?;
        match self.pos {
            Some((rows, cols)) => {
                let pe = dense_positional(g, rows, cols, &self.grid)?;
                g.tape.add(x, pe)
            }
            None => Ok(x),
        }
    }
}
