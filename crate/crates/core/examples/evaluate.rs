//! The four metrics on a handful of hand-made predictions, including the
//! argmax fallback for a document whose scores all fall below the threshold.
//!
//!     cargo run --example evaluate

use lwpt::finetune::decide_labels;
use lwpt::metrics::{evaluate, EvalInstance, HammingDenominator};

fn main() -> lwpt::Result<()> {
    let names: Vec<String> = ["sports", "politics", "tech", "health"].map(String::from).into();
    let rows = [
        (vec![0.91, 0.08, 0.62, 0.10], vec![0, 2]),
        (vec![0.12, 0.77, 0.30, 0.05], vec![1]),
        (vec![0.35, 0.20, 0.41, 0.44], vec![2]),
        (vec![0.05, 0.55, 0.10, 0.81], vec![1, 3]),
        (vec![0.66, 0.15, 0.20, 0.58], vec![3]),
    ];
    let inst: Vec<EvalInstance> = rows
        .iter()
        .map(|(s, g)| EvalInstance { scores: s.clone(), gold: g.clone() })
        .collect();
    let decided: Vec<Vec<usize>> = inst.iter().map(|i| decide_labels(&i.scores, 0.5)).collect();
    for (i, d) in inst.iter().zip(&decided) {
        let show = |ks: &[usize]| ks.iter().map(|&k| names[k].as_str()).collect::<Vec<_>>().join(",");
        println!("gold {:<16} predicted {}", show(&i.gold), show(d));
    }
    println!();
    for denominator in [HammingDenominator::LabelSlots, HammingDenominator::GoldLabels] {
        let r = evaluate(&inst, &decided, &names, denominator)?;
        println!("Hamming loss over {denominator:?}: {:.4}", r.hamming_loss);
    }
    print!("\n{}", evaluate(&inst, &decided, &names, HammingDenominator::LabelSlots)?.table());
    Ok(())
}
