use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use tamperlens_core::backbone::ContentFeatureMap;
use tamperlens_core::decoder::*;
use tamperlens_core::nn::{check_param_gradients, Graph, ParamInit, ParamStore, PatchGrid};
use tamperlens_core::stub::SegPromptEmbedding;
use tamperlens_core::tensor::{Real, Tensor};
use tamperlens_core::trace::TraceFeatureMap;

fn cfg(grid: PatchGrid, kind: DecoderKind, positional: bool) -> DecoderConfig {
    DecoderConfig {
        grid,
        heads: 2,
        mlp_hidden: 12,
        aux_tokens: 3,
        positional,
        kind,
    }
}

fn small_grid() -> PatchGrid {
    PatchGrid::for_image(8, 8, 4, 8).unwrap()
}

fn rand_vec(rng: &mut Xoshiro256PlusPlus, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

struct Inputs {
    fc: Tensor<f64>,
    ft: Tensor<f64>,
    seg: Tensor<f64>,
}

fn inputs(grid: PatchGrid, seed: u64) -> Inputs {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let (n, d) = (grid.num_patches(), grid.embed_dim);
    Inputs {
        fc: Tensor::new(&[n, d], rand_vec(&mut rng, n * d)).unwrap(),
        ft: Tensor::new(&[n, d], rand_vec(&mut rng, n * d)).unwrap().with_grad(),
        seg: Tensor::new(&[1, d], rand_vec(&mut rng, d)).unwrap().with_grad(),
    }
}

fn bind<T: Real>(
    g: &mut Graph<'_, T>,
    x: &Inputs,
    grid: PatchGrid,
) -> (ContentFeatureMap, TraceFeatureMap, SegPromptEmbedding) {
    let fc = g.tape.constant(x.fc.shape(), x.fc.data().iter().map(|&v| T::of(v)).collect()).unwrap();
    let ft = g.tape.leaf(&x.ft.cast::<T>());
    let seg = g.tape.leaf(&x.seg.cast::<T>());
    (
        ContentFeatureMap { features: fc, grid },
        TraceFeatureMap { features: ft, grid },
        SegPromptEmbedding { embedding: seg },
    )
}

fn build(c: DecoderConfig, seed: u64) -> (FusionDecoder, ParamStore<f64>) {
    let mut init = ParamInit::new(seed);
    let d = FusionDecoder::new(&mut init, "decoder", c).unwrap();
    (d, init.finish())
}

#[test]
fn default_geometry_gives_image_resolution_logits() {
    let grid = PatchGrid::for_image(64, 64, 8, 64).unwrap();
    let (dec, store) = build(cfg(grid, DecoderKind::Fusion, true), 1);
    let store = store.cast::<f32>();
    let x = inputs(grid, 2);
    let mut g = Graph::new(&store);
    let (fc, ft, seg) = bind(&mut g, &x, grid);
    let m = dec.decode_mask(&mut g, &fc, &ft, &seg).unwrap();
    assert_eq!(g.tape.shape(m.logits), &[64, 64]);
    assert!(g.tape.tensor(m.logits).all_finite());
}

#[test]
fn probe_records_schedule_and_step_order() {
    let grid = small_grid();
    let (dec, store) = build(cfg(grid, DecoderKind::Fusion, true), 3);
    assert_eq!(dec.layers.len(), FUSION_LAYERS);
    let x = inputs(grid, 4);
    let mut g = Graph::new(&store);
    g.enable_probe();
    let (fc, ft, seg) = bind(&mut g, &x, grid);
    dec.decode_mask(&mut g, &fc, &ft, &seg).unwrap();
    let want: Vec<String> = [
        "layer0:self_attn",
        "layer0:tokens_to_trace",
        "layer0:mlp",
        "layer0:trace_to_tokens",
        "layer1:self_attn",
        "layer1:tokens_to_content",
        "layer1:mlp",
        "layer1:content_to_tokens",
        "layer2:self_attn",
        "layer2:tokens_to_content",
        "layer2:mlp",
        "layer2:content_to_tokens",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    assert_eq!(g.take_probe(), want);
}

#[test]
fn layer_preserves_shapes_and_rejects_mismatch() {
    let grid = small_grid();
    let (dec, store) = build(cfg(grid, DecoderKind::Fusion, true), 5);
    let mut g = Graph::new(&store);
    let t = g.tape.constant(&[4, 8], vec![0.1; 32]).unwrap();
    let e = g.tape.constant(&[4, 8], vec![0.2; 32]).unwrap();
    let s = FusionState {
        tokens: t,
        embedding: e,
        kind: EmbeddingKind::Content,
    };
    let out = dec.layers[0].forward(&mut g, s, None, 0).unwrap();
    assert_eq!(g.tape.shape(out.tokens), &[4, 8]);
    assert_eq!(g.tape.shape(out.embedding), &[4, 8]);
    let bad = g.tape.constant(&[4, 6], vec![0.0; 24]).unwrap();
    let s = FusionState {
        tokens: t,
        embedding: bad,
        kind: EmbeddingKind::Content,
    };
    assert!(dec.layers[0].forward(&mut g, s, None, 0).is_err());
}

#[test]
fn grid_mismatch_is_rejected() {
    let grid = small_grid();
    let (dec, store) = build(cfg(grid, DecoderKind::Fusion, true), 6);
    let other = PatchGrid::for_image(8, 8, 2, 8).unwrap();
    let x = inputs(other, 7);
    let mut g = Graph::new(&store);
    let (fc, ft, seg) = bind(&mut g, &x, other);
    assert!(dec.decode_mask(&mut g, &fc, &ft, &seg).is_err());
}

#[test]
fn single_token_self_attention_is_value_path() {
    let grid = small_grid();
    let (dec, store) = build(cfg(grid, DecoderKind::Fusion, false), 8);
    let layer = &dec.layers[0];
    let mut g = Graph::new(&store);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);
    let t = g.tape.constant(&[1, 8], rand_vec(&mut rng, 8)).unwrap();
    let n = layer.norm_self.forward(&mut g, t).unwrap();
    let a = layer.self_attn.cross(&mut g, n, n).unwrap();
    let v = layer.self_attn.v.forward(&mut g, n).unwrap();
    let o = layer.self_attn.out.forward(&mut g, v).unwrap();
    for (x, y) in g.tape.value(a).iter().zip(g.tape.value(o)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn zero_embedding_matches_hand_traced_token_path() {
    let grid = small_grid();
    let (dec, store) = build(cfg(grid, DecoderKind::Fusion, false), 10);
    let layer = &dec.layers[1];
    let mut g = Graph::new(&store);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
    let t0 = g.tape.constant(&[4, 8], rand_vec(&mut rng, 32)).unwrap();
    let e0 = g.tape.constant(&[4, 8], vec![0.0; 32]).unwrap();
    let s = FusionState {
        tokens: t0,
        embedding: e0,
        kind: EmbeddingKind::Content,
    };
    let out = layer.forward(&mut g, s, None, 1).unwrap();

    // By hand: LN of a zero row is its bias (zero at init), so keys and
    // values are all zero and step 2 adds out(v(0)) = W_out·b_v + b_out.
    let p = g.params();
    let bv = p.get(layer.t2e.v.bias.unwrap()).data().to_vec();
    let wo = p.get(layer.t2e.out.weight).data().to_vec();
    let bo = p.get(layer.t2e.out.bias.unwrap()).data().to_vec();
    let step2: Vec<f64> = (0..8).map(|j| bo[j] + (0..8).map(|i| bv[i] * wo[i * 8 + j]).sum::<f64>()).collect();

    let n = layer.norm_self.forward(&mut g, t0).unwrap();
    let a = layer.self_attn.cross(&mut g, n, n).unwrap();
    let t1 = g.tape.add(t0, a).unwrap();
    let c = g.tape.constant(&[1, 8], step2).unwrap();
    let t2 = g.tape.add(t1, c).unwrap();
    let n = layer.norm_mlp.forward(&mut g, t2).unwrap();
    let m = layer.mlp.forward(&mut g, n).unwrap();
    let t3 = g.tape.add(t2, m).unwrap();
    for (x, y) in g.tape.value(out.tokens).iter().zip(g.tape.value(t3)) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn joint_patch_permutation_leaves_tokens_unchanged() {
    let grid = small_grid();
    let (dec, store) = build(cfg(grid, DecoderKind::Fusion, false), 12);
    let x = inputs(grid, 13);
    let perm = [2usize, 0, 3, 1];
    let permute = |t: &Tensor<f64>| {
        let d = 8;
        let data: Vec<f64> = perm.iter().flat_map(|&r| t.data()[r * d..(r + 1) * d].to_vec()).collect();
        Tensor::new(t.shape(), data).unwrap()
    };
    let y = Inputs {
        fc: permute(&x.fc),
        ft: permute(&x.ft),
        seg: x.seg.clone(),
    };
    let run = |inp: &Inputs| {
        let mut g = Graph::new(&store);
        let (fc, ft, seg) = bind(&mut g, inp, grid);
        let (t, _) = dec.fuse(&mut g, &fc, &ft, &seg).unwrap();
        g.tape.value(t).to_vec()
    };
    let (a, b) = (run(&x), run(&y));
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn gradients_reach_seg_trace_and_decoder_but_not_content() {
    let grid = small_grid();
    let (dec, store) = build(cfg(grid, DecoderKind::Fusion, true), 14);
    let x = inputs(grid, 15);
    let mut g = Graph::new(&store);
    let (fc, ft, seg) = bind(&mut g, &x, grid);
    let m = dec.decode_mask(&mut g, &fc, &ft, &seg).unwrap();
    let sq = g.tape.mul(m.logits, m.logits).unwrap();
    let loss = g.tape.mean_all(sq);
    g.tape.backward(loss).unwrap();
    let nonzero = |v: Option<&[f64]>| v.is_some_and(|g| g.iter().any(|x| *x != 0.0));
    assert!(nonzero(g.tape.grad(seg.embedding)));
    assert!(nonzero(g.tape.grad(ft.features)));
    assert!(g.tape.grad(fc.features).is_none());
    // Step 4 of the trace layer updates an embedding nothing reads
    // afterwards, so exactly those weights stay without gradient.
    let grads = g.param_grads();
    let dead = |name: &str| {
        ["norm_e2t_emb", "norm_e2t_tok", "e2t."].iter().any(|p| name.starts_with(&format!("decoder.layer0.{p}")))
    };
    for id in store.ids() {
        let name = store.name(id);
        let got = grads.iter().find(|(i, _)| *i == id);
        if dead(name) {
            assert!(got.is_none(), "{name} should be unreachable");
        } else {
            assert!(got.is_some_and(|(_, g)| g.iter().any(|x| *x != 0.0)), "{name} got no gradient");
        }
    }
}

#[test]
fn zeroed_trace_changes_output() {
    let grid = small_grid();
    let (dec, store) = build(cfg(grid, DecoderKind::Fusion, true), 16);
    let x = inputs(grid, 17);
    let mut z = inputs(grid, 17);
    z.ft = Tensor::zeros(z.ft.shape());
    let run = |inp: &Inputs| {
        let mut g = Graph::new(&store);
        let (fc, ft, seg) = bind(&mut g, inp, grid);
        let m = dec.decode_mask(&mut g, &fc, &ft, &seg).unwrap();
        g.tape.value(m.logits).to_vec()
    };
    assert_ne!(run(&x), run(&z));
    assert_eq!(run(&x), run(&x));
}

#[test]
fn single_cross_attention_variant() {
    let grid = small_grid();
    let (dec, store) = build(cfg(grid, DecoderKind::SingleCrossAttention, true), 18);
    assert!(dec.layers.is_empty());
    let x = inputs(grid, 19);
    let mut g = Graph::new(&store);
    g.enable_probe();
    let (fc, ft, seg) = bind(&mut g, &x, grid);
    let m = dec.decode_mask(&mut g, &fc, &ft, &seg).unwrap();
    assert_eq!(g.tape.shape(m.logits), &[8, 8]);
    assert_eq!(g.take_probe(), vec!["single:tokens_to_fused".to_string()]);
}

#[test]
fn decoder_passes_finite_difference_check() {
    let grid = PatchGrid::for_image(4, 4, 2, 4).unwrap();
    let mut c = cfg(grid, DecoderKind::Fusion, true);
    c.aux_tokens = 1;
    c.mlp_hidden = 5;
    let (dec, store) = build(c, 20);
    let x = inputs(grid, 21);
    let r = check_param_gradients(&store, |g| {
        let (fc, ft, seg) = bind(g, &x, grid);
        let m = dec.decode_mask(g, &fc, &ft, &seg)?;
        let w = g.tape.constant(&[4, 4], (0..16).map(|i| (i as f64 * 0.7).cos()).collect())?;
        let p = g.tape.mul(m.logits, w)?;
        let s = g.tape.sigmoid(p);
        Ok(g.tape.sum_all(s))
    })
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}
