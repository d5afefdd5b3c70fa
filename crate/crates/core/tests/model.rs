use tamperlens_core::losses::LossWeights;
use tamperlens_core::model::*;
use tamperlens_core::nn::Graph;
use tamperlens_core::stub::decode_text;
use tamperlens_core::tensor::Tensor;

fn image(seed: u64) -> Tensor<f32> {
    let n = 3 * 64 * 64;
    Tensor::new(
        &[3, 64, 64],
        (0..n).map(|i| (((i as u64 * 7919) ^ seed) % 255) as f32 / 255.0).collect(),
    )
    .unwrap()
}

#[test]
fn end_to_end_shapes_and_frozen_split() {
    let (m, store) = Model::build(ModelConfig::default(), 1).unwrap();
    let store = store.cast::<f32>();
    let img = image(3);
    let fc = m.content_features(&store, &img).unwrap();
    let mut g = Graph::new(&store);
    let out = m.forward(&mut g, &img, &fc).unwrap();
    assert_eq!(g.tape.shape(out.mask_logits), &[64, 64]);
    assert_eq!(g.tape.shape(out.token_logits), &[5, m.vocab.len()]);
    let seq = decode_text(g.tape.value(out.token_logits), m.vocab.len());
    assert_eq!(seq.len(), 5);
    let target = m.vocab.encode("<FAKE> splice [SEG] <EOS> <PAD>").unwrap();
    let gt = Tensor::zeros(&[64, 64]);
    let (loss, _, _) = m.loss(&mut g, &out, &target, &gt, &LossWeights::default()).unwrap();
    g.tape.backward(loss).unwrap();
    for (id, _) in g.param_grads() {
        assert!(store.get(id).requires_grad);
        assert!(!store.name(id).starts_with("backbone."));
    }
    assert!(m.trace.constraint_violation(&store) < 1e-6);
}

#[test]
fn zeroed_trace_freezes_trace_weights() {
    let cfg = ModelConfig {
        trace: TraceMode::Zeroed,
        ..ModelConfig::default()
    };
    let (_, store) = Model::build(cfg, 1).unwrap();
    for (_, name, t) in store.iter() {
        if name.starts_with("trace.") {
            assert!(!t.requires_grad);
        }
    }
}

#[test]
fn rejects_wrong_image_size() {
    let (m, store) = Model::build(ModelConfig::default(), 1).unwrap();
    let bad = Tensor::<f64>::zeros(&[3, 32, 32]);
    assert!(m.content_features(&store, &bad).is_err());
}
