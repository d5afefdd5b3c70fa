//! Finite-difference gradient suite shared by the gradcheck tests and the
//! acceptance run. Every case builds its loss in 64-bit and returns the
//! checker's report.

#![allow(dead_code)]

pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use tamperlens_core::backbone::ContentFeatureMap;
use tamperlens_core::decoder::{DecoderConfig, DecoderKind, FusionDecoder};
use tamperlens_core::forge::{render_coc_text, ManipulationType};
use tamperlens_core::losses::{bce_loss, dice_loss, mask_loss, text_loss, total_loss, LossWeights};
use tamperlens_core::model::{Model, ModelConfig, TraceMode};
use tamperlens_core::nn::{
    check_param_gradients, Attention, AttentionConfig, LayerNorm, Linear, Mlp2, ParamInit, PatchEmbed, PatchGrid,
    TransformerBlock,
};
use tamperlens_core::stub::{MllmStub, PromptSpec, StubConfig, TokenId, TokenSequence, Vocabulary};
use tamperlens_core::tensor::gradcheck::{check_gradients, GradCheckReport};
use tamperlens_core::tensor::{Activation, Reduce, Tensor, TensorError};
use tamperlens_core::trace::{TraceEncoder, TraceEncoderConfig};

pub const TOL: f64 = 1e-4;

type Case = (String, GradCheckReport);

fn rand_tensor(rng: &mut Xoshiro256PlusPlus, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

fn values(rng: &mut Xoshiro256PlusPlus, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape);
    t.requires_grad = false;
    t
}

/// Primitive operations, each checked against both of its inputs.
pub fn op_cases() -> Result<Vec<Case>, TensorError> {
    let mut out = Vec::new();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);

    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4]);
    let mut b_pos = rand_tensor(&mut rng, &[3, 1]);
    b_pos.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
    for kind in ["add", "sub", "mul", "div"] {
        let r = check_gradients(&[a.clone(), b.clone(), b_pos.clone()], |t, v| {
            let y = match kind {
                "add" => t.add(v[0], v[1])?,
                "sub" => t.sub(v[0], v[1])?,
                "mul" => t.mul(v[0], v[1])?,
                _ => t.div(v[0], v[2])?,
            };
            let y2 = t.mul(y, y)?;
            Ok(t.sum_all(y2))
        })?;
        out.push((format!("{kind} (broadcast)"), r));
    }

    // keep relu's inputs away from its kink
    let mut x = rand_tensor(&mut rng, &[2, 5]);
    x.data_mut().iter_mut().for_each(|v| *v += 0.05f64.copysign(*v));
    for kind in [Activation::Relu, Activation::Gelu, Activation::Sigmoid, Activation::Tanh] {
        let r = check_gradients(&[x.clone()], |t, v| {
            let y = t.activation(v[0], kind);
            let w = t.mul(y, v[0])?;
            Ok(t.sum_all(w))
        })?;
        out.push((format!("{kind:?}").to_lowercase(), r));
    }
    let mut xp = x.clone();
    xp.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.2);
    let r = check_gradients(&[xp], |t, v| {
        let e = t.exp(v[0]);
        let l = t.log(v[0]);
        let s = t.softplus(v[0]);
        let a = t.add(e, l)?;
        let b = t.mul(a, s)?;
        let n = t.neg(b);
        let n = t.add_scalar(n, 0.3);
        let n = t.mul_scalar(n, 1.7);
        Ok(t.sum_all(n))
    })?;
    out.push(("exp/log/softplus/neg/scalar".into(), r));

    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let r = check_gradients(&[a, b.clone()], |t, v| {
        let c = t.matmul(v[0], v[1])?;
        let c2 = t.mul(c, c)?;
        Ok(t.sum_all(c2))
    })?;
    out.push(("matmul".into(), r));
    let a3 = rand_tensor(&mut rng, &[2, 3, 4]);
    let r = check_gradients(&[a3, b], |t, v| {
        let c = t.matmul(v[0], v[1])?;
        let c2 = t.mul(c, c)?;
        Ok(t.sum_all(c2))
    })?;
    out.push(("batched matmul".into(), r));

    for (name, xs, ks, stride, pad) in [
        ("conv2d", [1, 5, 5], [2, 1, 3, 3], 1, 1),
        ("conv2d strided", [2, 7, 7], [3, 2, 5, 5], 2, 2),
    ] {
        let x = rand_tensor(&mut rng, &xs);
        let k = rand_tensor(&mut rng, &ks);
        let r = check_gradients(&[x, k], |t, v| {
            let y = t.conv2d(v[0], v[1], stride, pad)?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum_all(y2))
        })?;
        out.push((name.into(), r));
    }
    let x = rand_tensor(&mut rng, &[2, 3, 3]);
    for (name, ks) in [("conv_transpose2d", [2, 3, 2, 2]), ("conv_transpose2d overlapping", [2, 1, 3, 3])] {
        let k = rand_tensor(&mut rng, &ks);
        let r = check_gradients(&[x.clone(), k], |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], 2)?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum_all(y2))
        })?;
        out.push((name.into(), r));
    }

    let x = rand_tensor(&mut rng, &[3, 4]);
    let w = rand_tensor(&mut rng, &[3, 4]);
    for axis in [0, 1] {
        let r = check_gradients(&[x.clone(), w.clone()], |t, v| {
            let s = t.softmax(v[0], axis)?;
            let p = t.mul(s, v[1])?;
            Ok(t.sum_all(p))
        })?;
        out.push((format!("softmax axis {axis}"), r));
        let r = check_gradients(&[x.clone(), w.clone()], |t, v| {
            let s = t.log_softmax(v[0], axis)?;
            let p = t.mul(s, v[1])?;
            Ok(t.sum_all(p))
        })?;
        out.push((format!("log_softmax axis {axis}"), r));
    }
    let gamma = rand_tensor(&mut rng, &[4]);
    let beta = rand_tensor(&mut rng, &[4]);
    let r = check_gradients(&[x.clone(), gamma, beta, w.clone()], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2])?;
        let p = t.mul(y, v[3])?;
        Ok(t.sum_all(p))
    })?;
    out.push(("layer_norm".into(), r));
    let r = check_gradients(&[x.clone(), w.clone()], |t, v| {
        let m = t.reduce(v[0], Reduce::Mean, Some(0))?;
        let s = t.reduce(v[1], Reduce::Sum, Some(1))?;
        let m2 = t.mul(m, m)?;
        let s2 = t.mul(s, s)?;
        let a = t.mean_all(m2);
        let b = t.sum_all(s2);
        t.add(a, b)
    })?;
    out.push(("reduce".into(), r));
    let r = check_gradients(&[x.clone(), w], |t, v| {
        let p = t.permute(v[0], &[1, 0])?;
        let r = t.reshape(p, &[2, 6])?;
        let s = t.slice(r, 1, 2, 3)?;
        let w6 = t.reshape(v[1], &[2, 6])?;
        let c = t.concat(&[s, w6, s], 1)?;
        let c2 = t.mul(c, c)?;
        Ok(t.sum_all(c2))
    })?;
    out.push(("permute/reshape/slice/concat".into(), r));
    let b = rand_tensor(&mut rng, &[4, 5]);
    let w = rand_tensor(&mut rng, &[3, 5]);
    let r = check_gradients(&[x, b, w], |t, v| {
        let c = t.matmul(v[0], v[1])?;
        let s = t.softmax(c, 1)?;
        let p = t.mul(s, v[2])?;
        Ok(t.sum_all(p))
    })?;
    out.push(("matmul then softmax".into(), r));
    Ok(out)
}

/// Composite layers and the model parts, checked with respect to every
/// trainable parameter.
pub fn block_cases() -> Result<Vec<Case>, TensorError> {
    let mut out = Vec::new();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);

    let mut init = ParamInit::new(3);
    let lin = Linear::new(&mut init, "lin", 4, 3, true);
    let ln = LayerNorm::new(&mut init, "ln", 3);
    let mlp = Mlp2::new(&mut init, "mlp", 3, 5, 2);
    let store = init.finish();
    let x = values(&mut rng, &[3, 4]);
    let r = check_param_gradients(&store, |g| {
        let v = g.tape.leaf(&x);
        let h = lin.forward(g, v)?;
        let h = ln.forward(g, h)?;
        let h = mlp.forward(g, h)?;
        let h2 = g.tape.mul(h, h)?;
        Ok(g.tape.sum_all(h2))
    })?;
    out.push(("linear + layer norm + mlp".into(), r));

    let grid = PatchGrid::for_image(4, 4, 2, 4)?;
    let acfg = AttentionConfig::new(4, 2)?;
    let mut init = ParamInit::new(4);
    let pe = PatchEmbed::new(&mut init, "pe", 2, grid, true);
    let blk = TransformerBlock::new(&mut init, "blk", acfg, 6);
    let cross = Attention::new(&mut init, "cross", acfg);
    let store = init.finish();
    let img = values(&mut rng, &[2, 4, 4]);
    let ctx = values(&mut rng, &[3, 4]);
    let r = check_param_gradients(&store, |g| {
        let x = g.tape.leaf(&img);
        let c = g.tape.leaf(&ctx);
        let t = pe.forward(g, x)?;
        let t = blk.forward(g, t)?;
        let t = cross.cross(g, t, c)?;
        let sq = g.tape.mul(t, t)?;
        Ok(g.tape.sum_all(sq))
    })?;
    out.push(("patch embed + transformer block + cross attention".into(), r));

    let mut init = ParamInit::new(5);
    let enc = TraceEncoder::new(
        &mut init,
        "trace",
        TraceEncoderConfig {
            image_size: 8,
            patch_size: 4,
            dim: 4,
            heads: 2,
            mlp_hidden: 6,
            blocks: 1,
            lifted_channels: 2,
            constrained_mid: 2,
        },
    )?;
    let mut store = init.finish();
    enc.project_constraints(&mut store);
    let img = Tensor::new(&[3, 8, 8], (0..192).map(|i| ((i * 37 % 101) as f64) / 101.0).collect())?;
    let w = values(&mut rng, &[4, 4]);
    let r = check_param_gradients(&store, |g| {
        let x = g.tape.leaf(&img);
        let f = enc.encode(g, x)?;
        let sq = g.tape.mul(f.features, f.features)?;
        let wv = g.tape.leaf(&w);
        let sq = g.tape.mul(sq, wv)?;
        Ok(g.tape.sum_all(sq))
    })?;
    out.push(("trace encoder".into(), r));

    let vocab = Vocabulary::default();
    let prompt = PromptSpec::default_for(&vocab);
    let mut init = ParamInit::new(6);
    let stub = MllmStub::new(
        &mut init,
        "stub",
        StubConfig {
            content_dim: 4,
            prompt_dim: 3,
            d_llm: 4,
            hidden: 6,
            d_dec: 4,
            vocab_size: vocab.len(),
        },
    );
    let store = init.finish();
    let content = values(&mut rng, &[4, 4]);
    let target = render_coc_text(ManipulationType::Splice, &vocab).unwrap();
    let r = check_param_gradients(&store, |g| {
        let fc = ContentFeatureMap::from_tensor(g, &content, grid)?;
        let (h, logits) = stub.forward(g, &fc, &prompt)?;
        let seg = stub.seg_embedding(g, &h)?;
        let txt = text_loss(&mut g.tape, logits, &target)?;
        let s2 = g.tape.mul(seg.embedding, seg.embedding)?;
        let s2 = g.tape.sum_all(s2);
        g.tape.add(txt, s2)
    })?;
    out.push(("language stub".into(), r));

    for kind in [DecoderKind::Fusion, DecoderKind::SingleCrossAttention] {
        let mut init = ParamInit::new(7);
        let dec = FusionDecoder::new(
            &mut init,
            "decoder",
            DecoderConfig {
                grid,
                heads: 2,
                mlp_hidden: 5,
                aux_tokens: 1,
                positional: true,
                kind,
            },
        )?;
        let store = init.finish();
        let (fc, ft, seg) = (values(&mut rng, &[4, 4]), values(&mut rng, &[4, 4]), values(&mut rng, &[1, 4]));
        let w = values(&mut rng, &[4, 4]);
        let r = check_param_gradients(&store, |g| {
            let c = ContentFeatureMap::from_tensor(g, &fc, grid)?;
            let t = tamperlens_core::trace::TraceFeatureMap {
                features: g.tape.leaf(&ft),
                grid,
            };
            let s = tamperlens_core::stub::SegPromptEmbedding {
                embedding: g.tape.leaf(&seg),
            };
            let m = dec.decode_mask(g, &c, &t, &s)?;
            let wv = g.tape.leaf(&w);
            let p = g.tape.mul(m.logits, wv)?;
            let p = g.tape.sigmoid(p);
            Ok(g.tape.sum_all(p))
        })?;
        out.push((format!("decoder ({kind:?})").to_lowercase(), r));
    }
    Ok(out)
}

/// Loss functions with respect to their logits.
pub fn loss_cases() -> Result<Vec<Case>, TensorError> {
    let mut out = Vec::new();
    let x = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.9).sin() * 2.0).collect())?.with_grad();
    let gt = Tensor::new(&[3, 4], (0..12).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect())?;
    let w = LossWeights::default();
    out.push(("bce".into(), check_gradients(&[x.clone(), gt.clone()], |t, v| bce_loss(t, v[0], v[1]))?));
    out.push(("dice".into(), check_gradients(&[x.clone(), gt.clone()], |t, v| dice_loss(t, v[0], v[1]))?));
    out.push(("mask loss".into(), check_gradients(&[x.clone(), gt.clone()], |t, v| mask_loss(t, v[0], v[1], &w))?));
    let target = TokenSequence(vec![TokenId(2), TokenId(1)]);
    let logits = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7])?.with_grad();
    out.push(("text loss".into(), check_gradients(&[logits.clone()], |t, v| text_loss(t, v[0], &target))?));
    let r = check_gradients(&[logits, x, gt], |t, v| {
        let a = text_loss(t, v[0], &target)?;
        let b = mask_loss(t, v[1], v[2], &w)?;
        total_loss(t, a, b, &w)
    })?;
    out.push(("total loss".into(), r));
    Ok(out)
}

/// The whole trainable model on a tiny geometry, through the training
/// objective.
pub fn model_cases() -> Result<Vec<Case>, TensorError> {
    let cfg = ModelConfig {
        image_size: 8,
        patch_size: 4,
        dim: 4,
        heads: 2,
        mlp_hidden: 4,
        trace_blocks: 1,
        backbone_blocks: 1,
        lifted_channels: 2,
        constrained_mid: 2,
        d_llm: 4,
        prompt_dim: 2,
        stub_hidden: 4,
        aux_tokens: 1,
        decoder: DecoderKind::Fusion,
        trace: TraceMode::Enabled,
    };
    let (model, store) = Model::build(cfg, 8)?;
    let image = Tensor::new(&[3, 8, 8], (0..192).map(|i| ((i * 53 % 97) as f64) / 97.0).collect())?;
    let gt = Tensor::new(&[8, 8], (0..64).map(|i| ((i % 8) < 4 && i / 8 > 2) as u8 as f64).collect())?;
    let content = model.content_features(&store, &image)?;
    let target = render_coc_text(ManipulationType::Splice, &model.vocab).unwrap();
    let w = LossWeights::default();
    let r = check_param_gradients(&store, |g| {
        let out = model.forward(g, &image, &content)?;
        Ok(model.loss(g, &out, &target, &gt, &w)?.0)
    })?;
    Ok(vec![("full model objective".into(), r)])
}

pub fn gradient_suite() -> Result<Vec<Case>, TensorError> {
    let mut all = op_cases()?;
    all.extend(block_cases()?);
    all.extend(loss_cases()?);
    all.extend(model_cases()?);
    Ok(all)
}
