//! Times one training step of a configuration on synthetic scenes.
//!
//! cargo run --release -p c3vg-core --example step_timing -- [image_size] [batch] [steps] [patch_size] [projection_width] [head_hidden]

use std::time::Instant;

use c3vg::config::TrainConfig;
use c3vg::data::{generate_scene, render_sample};
use c3vg::losses::total_loss;
use c3vg::model::{Batch, C3vg};
use c3vg::nn::ParamStore;
use c3vg::optim::Adam;
use c3vg::text::Vocabulary;
use candle_core::DType;

fn main() -> c3vg::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer")).collect();
    let mut cfg = TrainConfig::toy();
    cfg.image_size = args.first().copied().unwrap_or(cfg.image_size);
    cfg.batch_size = args.get(1).copied().unwrap_or(cfg.batch_size);
    let steps = args.get(2).copied().unwrap_or(5);
    cfg.model.encoder.patch_size = args.get(3).copied().unwrap_or(cfg.model.encoder.patch_size);
    cfg.model.encoder.projection_width = args.get(4).copied().unwrap_or(cfg.model.encoder.projection_width);
    cfg.model.head_hidden = args.get(5).copied().unwrap_or(cfg.model.head_hidden);
    let samples = (0..cfg.batch_size as u64)
        .map(|i| render_sample(&generate_scene(i, cfg.image_size)?, format!("s{i}")))
        .collect::<c3vg::Result<Vec<_>>>()?;
    let vocab = Vocabulary::build(samples.iter().map(|s| s.expression.as_str()));
    cfg.model.encoder.vocab_size = vocab.len();
    let mut store = ParamStore::new(DType::F32, 0);
    let model = C3vg::new(&mut store, &cfg)?;
    println!("parameters: {}", store.num_parameters());
    let mut opt = Adam::new(&store, &cfg.optimizer)?;
    let refs: Vec<_> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, &vocab, cfg.model.encoder.max_text_len, DType::F32)?;
    for i in 0..steps {
        let t0 = Instant::now();
        let out = model.forward_pipeline(&batch, true)?;
        let t1 = Instant::now();
        let loss = total_loss(&out.coarse, &out.fine, &batch.gold_boxes, &batch.gold_masks, &cfg.weights, &cfg.flags)?;
        let grads = loss.total.backward()?;
        let t2 = Instant::now();
        opt.step(&grads)?;
        let t3 = Instant::now();
        println!(
            "step {i}: forward {:?} loss+backward {:?} adam {:?} total {:.4}",
            t1 - t0,
            t2 - t1,
            t3 - t2,
            loss.report.total
        );
    }
    Ok(())
}
