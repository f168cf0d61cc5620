//! Slow, literal metric implementations used as references.

use lwpt::metrics::EvalInstance;
use rand::Rng;

fn top_label(scores: &[f64]) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order[0]
}

pub fn one_error(inst: &[EvalInstance]) -> f64 {
    let wrong = inst.iter().filter(|i| !i.gold.contains(&top_label(&i.scores))).count();
    wrong as f64 / inst.len() as f64
}

pub fn hamming(inst: &[EvalInstance], decided: &[Vec<usize>], l: usize) -> f64 {
    let mut wrong = 0;
    for (i, d) in inst.iter().zip(decided) {
        for k in 0..l {
            if i.gold.contains(&k) != d.contains(&k) {
                wrong += 1;
            }
        }
    }
    wrong as f64 / (inst.len() * l) as f64
}

fn f1(tp: usize, predicted: usize, actual: usize) -> f64 {
    let p = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
    let r = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn counts(inst: &[EvalInstance], decided: &[Vec<usize>], k: usize) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for (i, d) in inst.iter().zip(decided) {
        let (g, p) = (i.gold.contains(&k), d.contains(&k));
        c.0 += (g && p) as usize;
        c.1 += p as usize;
        c.2 += g as usize;
    }
    c
}

pub fn macro_f1(inst: &[EvalInstance], decided: &[Vec<usize>], l: usize) -> f64 {
    (0..l)
        .map(|k| {
            let (tp, p, a) = counts(inst, decided, k);
            f1(tp, p, a)
        })
        .sum::<f64>()
        / l as f64
}

pub fn micro_f1(inst: &[EvalInstance], decided: &[Vec<usize>], l: usize) -> f64 {
    let (mut tp, mut p, mut a) = (0, 0, 0);
    for k in 0..l {
        let c = counts(inst, decided, k);
        tp += c.0;
        p += c.1;
        a += c.2;
    }
    f1(tp, p, a)
}

/// Random evaluation set with `1..=10` labels and `1..=50` instances. Scores
/// are coarsened half the time so ties show up; gold and decided sets may be
/// empty.
pub fn fuzz_case(rng: &mut impl Rng) -> (usize, Vec<EvalInstance>, Vec<Vec<usize>>) {
    let l = rng.gen_range(1..=10);
    let n = rng.gen_range(1..=50);
    let coarse = rng.gen_bool(0.5);
    let mut inst = Vec::with_capacity(n);
    let mut decided = Vec::with_capacity(n);
    for _ in 0..n {
        let scores: Vec<f64> = (0..l)
            .map(|_| {
                let s: f64 = rng.gen();
                if coarse {
                    (s * 4.0).round() / 4.0
                } else {
                    s
                }
            })
            .collect();
        let gold = (0..l).filter(|_| rng.gen_bool(0.3)).collect();
        let d = if rng.gen_bool(0.5) {
            lwpt::finetune::decide_labels(&scores, 0.5)
        } else {
            (0..l).filter(|_| rng.gen_bool(0.4)).collect()
        };
        inst.push(EvalInstance { scores, gold });
        decided.push(d);
    }
    (l, inst, decided)
}

/// Worst absolute gap between the library metrics and the oracles.
pub fn metric_gap(l: usize, inst: &[EvalInstance], decided: &[Vec<usize>]) -> f64 {
    use lwpt::metrics::{self as m, HammingDenominator};
    let pairs = [
        (m::one_error(inst).unwrap(), one_error(inst)),
        (m::hamming_loss(inst, decided, HammingDenominator::LabelSlots).unwrap(), hamming(inst, decided, l)),
        (m::macro_f1(inst, decided).unwrap(), macro_f1(inst, decided, l)),
        (m::micro_f1(inst, decided).unwrap(), micro_f1(inst, decided, l)),
    ];
    pairs.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}
