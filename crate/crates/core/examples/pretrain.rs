//! Label-wise contrastive pre-training of an LW-LSTM pair on a synthetic
//! corpus, printing the loss curve against the ln(n) chance level.
//!
//!     cargo run --release --example pretrain -- [steps] [candidates]

use lwpt::corpus::{split_70_15_15, synth_corpus, Layout, SynthConfig};
use lwpt::encoders::{EncoderConfig, EncoderKind};
use lwpt::pipeline::Dataset;
use lwpt::pretrain::{run_pretraining, PretrainConfig};

fn main() -> lwpt::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(500);
    let candidates = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let corpus = synth_corpus(&SynthConfig::default())?;
    let (train, valid, test) = split_70_15_15(&corpus.docs);
    let data = Dataset::new(&train, &valid, &test, 1)?;
    let enc = EncoderConfig::new(EncoderKind::LwLstm, data.vocab.len(), 16, data.labels.len());
    let cfg = PretrainConfig {
        num_candidates: candidates,
        batch_size: 32,
        steps,
        log_every: 0,
        ..Default::default()
    };
    let out = run_pretraining(&data.train, &enc, Layout::flat(256), &cfg)?;
    println!("chance level ln {candidates} = {:.4}", (candidates as f64).ln());
    for (i, chunk) in out.losses.chunks(50).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:>5}-{:<5} {mean:.4} {}", i * 50 + 1, i * 50 + chunk.len(), "#".repeat((mean * 40.0) as usize));
    }
    println!("{} epochs of instances, {} skipped, {:.1}s", out.epochs, out.skipped, out.seconds);
    Ok(())
}
