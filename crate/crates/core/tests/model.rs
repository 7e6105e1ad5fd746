use c3vg::config::TrainConfig;
use c3vg::data::{generate_scene, render_sample};
use c3vg::model::{Batch, C3vg};
use c3vg::nn::ParamStore;
use c3vg::text::Vocabulary;
use candle_core::DType;

fn setup(invert: bool) -> (C3vg, Batch) {
    let samples: Vec<_> = (0..2).map(|i| render_sample(&generate_scene(i, 64).unwrap(), "s").unwrap()).collect();
    let vocab = Vocabulary::build(samples.iter().map(|s| s.expression.as_str()));
    let mut cfg = TrainConfig::toy();
    cfg.model.encoder.vocab_size = vocab.len();
    cfg.flags.invert_box_weight = invert;
    let mut store = ParamStore::new(DType::F32, 5);
    let model = C3vg::new(&mut store, &cfg).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, &vocab, cfg.model.encoder.max_text_len, DType::F32).unwrap();
    (model, batch)
}

fn values(t: &candle_core::Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn inverted_box_weight_changes_prior_and_fine_outputs() {
    let (plain, batch) = setup(false);
    let (inverted, _) = setup(true);
    let a = plain.forward_pipeline(&batch, false).unwrap();
    let b = inverted.forward_pipeline(&batch, false).unwrap();
    // Same weights, so the coarse stage is identical and only the prior differs.
    assert_eq!(values(&a.coarse.boxes), values(&b.coarse.boxes));
    let (wa, wb) = (values(&a.intermediates.box_weight), values(&b.intermediates.box_weight));
    for (x, y) in wa.iter().zip(&wb) {
        let pair = if x < y { (*x, *y) } else { (*y, *x) };
        assert!(x == y || (pair.0 - 0.1).abs() < 1e-6 && pair.1 == 1.0);
    }
    assert_ne!(wa, wb);
    assert_ne!(values(&a.fine.mask_logits), values(&b.fine.mask_logits));
}

#[test]
fn box_weight_takes_two_values() {
    let (model, batch) = setup(false);
    let out = model.forward_pipeline(&batch, false).unwrap();
    for v in values(&out.intermediates.box_weight) {
        assert!((v - 0.1).abs() < 1e-6 || v == 1.0, "{v}");
    }
    let (h, w) = out.intermediates.grid;
    assert_eq!(out.intermediates.box_weight.dims(), [2, h, w]);
    let mw = values(&out.intermediates.mask_weight);
    assert!(mw.iter().all(|v| (0.0..=1.0).contains(v)));
}
