//! End-to-end walkthrough: generate the toy corpus, pretrain the encoder
//! pair, initialize the memory banks, train with the full objective and
//! report retrieval metrics.
//!
//! ```bash
//! cargo run --release -p cgclip --example train_reid
//! ```

use cgclip::data::{gen_synthetic_dataset, vocab_size, GenConfig};
use cgclip::model::{pretrain_clip, ModelDims, PretrainConfig};
use cgclip::pipeline::{BranchConfig, Pipeline};
use cgclip::train::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let seed = 7;

    let gen = GenConfig {
        seed,
        ..GenConfig::default()
    };
    let dataset = gen_synthetic_dataset(&gen)?;
    println!(
        "corpus: {} identities, {} tracklets, {} frames",
        dataset.identities.len(),
        dataset.tracklets.len(),
        dataset.tracklets.iter().map(|t| t.frames.len()).sum::<usize>()
    );

    let dims = ModelDims::new(
        gen.height,
        gen.width,
        8,
        64,
        4,
        2,
        32,
        16,
        vocab_size(dataset.identities.len()),
    )?;

    let pretrain_cfg = PretrainConfig::default();
    let t0 = std::time::Instant::now();
    let pretrained = pretrain_clip(&dataset, &dims, &pretrain_cfg, seed)?;
    println!(
        "pretrain: {} steps in {:.1?}, final loss {:.4}, holdout top-1 {:.3}",
        pretrain_cfg.steps,
        t0.elapsed(),
        pretrained.final_loss,
        pretrained.holdout_top1
    );

    let train_cfg = TrainConfig {
        epochs: 40,
        eval_every: 5,
        early_stop_map: Some(0.95),
        ..TrainConfig::default()
    };
    let branch = BranchConfig {
        n_query_tokens: 4,
        fusion_blocks: 2,
        fusion_variant: cgclip::memory::FusionVariant::CrossThenSelf,
        heads: 4,
        momentum: train_cfg.momentum,
        use_tfe: train_cfg.use_tfe,
        id_strategy: train_cfg.id_strategy,
    };
    let mut pipeline = Pipeline::build(&dataset, dims, &pretrained, &branch, seed)?;

    let t1 = std::time::Instant::now();
    let report = train(&mut pipeline, &dataset, &train_cfg, seed)?;
    println!("train: {} epochs in {:.1?}", report.epochs_run, t1.elapsed());
    for (epoch, metrics) in &report.evals {
        println!(
            "  epoch {:>3}: mAP {:.4}  CMC@1 {:.4}",
            epoch, metrics.map, metrics.cmc[0].1
        );
    }
    let m = &report.final_metrics;
    println!(
        "final: mAP {:.4}, CMC@1 {:.4}, {} queries / {} gallery",
        m.map, m.cmc[0].1, m.num_queries, m.num_gallery
    );
    Ok(())
}
