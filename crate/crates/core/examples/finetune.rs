//! Pre-trains, fine-tunes and evaluates HLW-LSTM on a synthetic corpus, then
//! round-trips the result through a checkpoint file.
//!
//!     cargo run --release --example finetune -- [pretrain_steps] [epochs]

use lwpt::checkpoint::{Checkpoint, Stage};
use lwpt::corpus::{split_70_15_15, synth_corpus, Layout, SynthConfig};
use lwpt::encoders::{EncoderConfig, EncoderKind};
use lwpt::finetune::predict_probs;
use lwpt::pipeline::{run_pipeline, Dataset, PipelineConfig};

fn main() -> lwpt::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let corpus = synth_corpus(&SynthConfig { num_docs: 1000, ..Default::default() })?;
    let (train, valid, test) = split_70_15_15(&corpus.docs);
    let data = Dataset::new(&train, &valid, &test, 1)?;
    let enc = EncoderConfig::new(EncoderKind::HlwLstm, data.vocab.len(), 12, data.labels.len());
    let layout = Layout::hierarchical(8, 8);
    let mut cfg = PipelineConfig::new(enc, layout);
    cfg.pretrain.steps = steps;
    cfg.pretrain.batch_size = 32;
    cfg.finetune.epochs = epochs;
    let r = run_pipeline(&data, &cfg)?;
    for e in &r.finetune.history {
        println!(
            "epoch {:>2}: train loss {:.4}, valid Micro-F1 {:.4}",
            e.epoch, e.train_loss, e.valid_micro_f1
        );
    }
    println!("\nbest epoch {}; test set:\n{}", r.finetune.best_epoch, r.test_report.table());

    let ck = Checkpoint {
        stage: Stage::Finetuned,
        model: r.finetune.model.clone(),
        layout,
        vocab: data.vocab.clone(),
        labels: data.labels.clone(),
        extra: serde_json::Value::Null,
    };
    let path = std::env::temp_dir().join("lwpt-example.ckpt");
    ck.save(&path)?;
    let back = Checkpoint::load(&path)?;
    let again = predict_probs(&back.model, &data.test, layout, 64)?;
    println!("reloaded checkpoint reproduces test scores: {}", again == r.test_probs);
    std::fs::remove_file(&path).ok();
    Ok(())
}
