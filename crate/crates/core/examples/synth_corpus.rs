//! Generates the default synthetic corpus and prints its statistics next to
//! the planted label structure.
//!
//!     cargo run --release --example synth_corpus -- [num_docs] [seed]

use lwpt::corpus::{corpus_stats, synth_corpus, SynthConfig};

fn main() -> lwpt::Result<()> {
    let mut args = std::env::args().skip(1);
    let num_docs = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(13);
    let corpus = synth_corpus(&SynthConfig { num_docs, seed, ..Default::default() })?;
    let stats = corpus_stats(&corpus.docs)?;
    println!(
        "{} documents, {} token types, {} labels, {:.2} labels and {:.1} words per document",
        stats.num_docs, stats.vocab_size, stats.num_labels, stats.avg_labels_per_doc, stats.avg_words_per_doc
    );
    let doc = &corpus.docs[0];
    println!("\n{} {:?}", doc.id, doc.labels);
    for s in &doc.sentences {
        println!("  {}", s.join(" "));
    }

    let truth = &corpus.truth;
    let l = truth.label_names.len();
    println!("\nP(b | a): generator truth / observed");
    for a in 0..l {
        let with_a: Vec<_> = corpus.docs.iter().filter(|d| d.labels.contains(&truth.label_names[a])).collect();
        print!("{:>8}", truth.label_names[a]);
        for b in 0..l {
            let both = with_a.iter().filter(|d| d.labels.contains(&truth.label_names[b])).count();
            print!("  {:.2}/{:.2}", truth.correlation[a][b], both as f64 / with_a.len().max(1) as f64);
        }
        println!();
    }
    Ok(())
}
