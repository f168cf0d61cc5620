//! Pre-trains LW-LSTM on a synthetic corpus with planted label pairs, then
//! measures how often each label shows up among the nearest neighbors of a
//! document under another label's representation, and compares the result
//! with the planted conditional probabilities.
//!
//!     cargo run --release --example label_correlation -- [steps] [topk]

use lwpt::analysis::{align_truth, build_index, correlation_report, neighbors, ReprSource};
use lwpt::corpus::{split_70_15_15, synth_corpus, Layout, SynthConfig};
use lwpt::encoders::{EncoderConfig, EncoderKind};
use lwpt::pipeline::{initial_model, Dataset};
use lwpt::pretrain::{pretrain_model, PretrainConfig};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> lwpt::Result<()> {
    let (steps, topk) = (arg(1, 600), arg(2, 50));
    let corpus = synth_corpus(&SynthConfig::default())?;
    let (train, valid, test) = split_70_15_15(&corpus.docs);
    let data = Dataset::new(&train, &valid, &test, 1)?;
    let layout = Layout::flat(256);
    let enc = EncoderConfig::new(EncoderKind::LwLstm, data.vocab.len(), 16, data.labels.len());
    let cfg = PretrainConfig { batch_size: 32, steps, ..Default::default() };
    let out = pretrain_model(initial_model(&enc, cfg.seed)?, &data.train, layout, &cfg)?;
    println!("pre-training loss: {:.4} -> {:.4}", out.losses[0], out.tail_loss(100).unwrap_or(f64::NAN));

    let index = build_index(&out.model, &data.train, layout, ReprSource::TEncoder, 64)?;
    let planted = align_truth(&corpus.truth, &data.labels)?;
    let report = correlation_report(&index, &data.labels, Some(planted.clone()), topk)?;
    let names = data.labels.names();
    println!("\nmeasured neighbor frequency (row a: queries with a, a-wise representations) / planted P(b|a)");
    print!("{:>8}", "");
    for n in names {
        print!("{n:>14}");
    }
    println!();
    for (a, row) in report.measured.iter().enumerate() {
        print!("{:>8}", names[a]);
        for (b, m) in row.iter().enumerate() {
            print!("{:>7.2}/{:<6.2}", m, planted[a][b]);
        }
        println!();
    }
    println!("rank correlation (off-diagonal): {:.4}", report.rank_correlation.unwrap_or(f64::NAN));

    let a = data.labels.require("label0")?;
    if let Some(q) = data.train.iter().find(|d| d.has_label(a)) {
        let table = neighbors(&index, &q.id, a, topk)?;
        println!("\ntop {topk} neighbors of {} under label0:", q.id);
        for (name, f) in table.shown(&data.labels, 0.1) {
            println!("  {name:<8} {:>5.1}%", 100.0 * f);
        }
    }
    Ok(())
}
