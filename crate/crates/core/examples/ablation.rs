//! Pre-training ablation on the default synthetic corpus: LW-LSTM without
//! pre-training, LW-LSTM with it, and the single-context LSTM baseline with
//! it, over several seeds.
//!
//!     cargo run --release --example ablation -- [seeds] [steps] [epochs] [dim] [noise]
//!
//! `noise` is the expected filler fraction of each document (default 0.5);
//! raising it moves the corpus away from ceiling scores.

use lwpt::corpus::{split_70_15_15, synth_corpus, Layout, SynthConfig};
use lwpt::encoders::{EncoderConfig, EncoderKind};
use lwpt::pipeline::{run_pipeline, Dataset, Init, PipelineConfig};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> lwpt::Result<()> {
    let (seeds, steps, epochs, dim) = (arg(1, 3), arg(2, 600), arg(3, 20), arg(4, 16));
    let noise = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let corpus = synth_corpus(&SynthConfig { noise_rate: noise, ..SynthConfig::default() })?;
    let (train, valid, test) = split_70_15_15(&corpus.docs);
    let data = Dataset::new(&train, &valid, &test, 1)?;
    let rows = [
        ("LW-LSTM", EncoderKind::LwLstm, Init::Random),
        ("LW-LSTM+PT", EncoderKind::LwLstm, Init::Pretrained),
        ("LSTM+PT", EncoderKind::LstmAttn, Init::Pretrained),
    ];
    println!("{:<12} {:>4} {:>8} {:>8} {:>8} {:>8} {:>6}", "run", "seed", "OE", "HL", "MacroF1", "MicroF1", "best");
    for seed in 0..seeds as u64 {
        for (name, kind, init) in rows {
            let enc = EncoderConfig::new(kind, data.vocab.len(), dim, data.labels.len());
            let mut cfg = PipelineConfig::new(enc, Layout::flat(256));
            cfg.init = init;
            cfg.pretrain.batch_size = 32;
            cfg.pretrain.steps = steps;
            cfg.pretrain.seed = 100 + seed;
            cfg.finetune.epochs = epochs;
            cfg.finetune.seed = 200 + seed;
            let r = run_pipeline(&data, &cfg)?;
            let m = &r.test_report;
            println!(
                "{name:<12} {seed:>4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>6}",
                m.one_error, m.hamming_loss, m.macro_f1, m.micro_f1, r.finetune.best_epoch
            );
        }
    }
    Ok(())
}
