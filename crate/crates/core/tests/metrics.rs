mod common;

use common::oracle::{fuzz_case, metric_gap};
use common::rng;
use lwpt::metrics::*;
use lwpt::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn inst(scores: &[f64], gold: &[usize]) -> EvalInstance {
    EvalInstance {
        scores: scores.to_vec(),
        gold: gold.to_vec(),
    }
}

fn worked_example() -> (Vec<EvalInstance>, Vec<Vec<usize>>) {
    (
        vec![
            inst(&[0.9, 0.2, 0.6], &[0, 2]),
            inst(&[0.1, 0.8, 0.3], &[0]),
            inst(&[0.4, 0.4, 0.1], &[1]),
        ],
        vec![vec![0, 2], vec![1], vec![0]],
    )
}

#[test]
fn worked_example_by_hand() {
    let (i, d) = worked_example();
    // The tie in the third instance resolves to label 0.
    assert_eq!(one_error(&i).unwrap(), 2.0 / 3.0);
    assert_eq!(hamming_loss(&i, &d, HammingDenominator::LabelSlots).unwrap(), 4.0 / 9.0);
    assert_eq!(hamming_loss(&i, &d, HammingDenominator::GoldLabels).unwrap(), 1.0);
    assert_eq!(macro_f1(&i, &d).unwrap(), 0.5);
    assert_eq!(micro_f1(&i, &d).unwrap(), 0.5);
    let names: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    let r = evaluate(&i, &d, &names, HammingDenominator::LabelSlots).unwrap();
    let f1: Vec<f64> = r.per_label.iter().map(|p| p.f1).collect();
    assert_eq!(f1, vec![0.5, 0.0, 1.0]);
    assert_eq!(r.per_label.iter().map(|p| p.support).collect::<Vec<_>>(), vec![2, 1, 1]);
    let table = r.table();
    assert!(table.contains("MacroF1") && table.contains("0.5000"));
}

#[test]
fn perfect_predictions() {
    let i = vec![inst(&[0.9, 0.1], &[0]), inst(&[0.6, 0.7], &[0, 1])];
    let d = vec![vec![0], vec![0, 1]];
    assert_eq!(one_error(&i).unwrap(), 0.0);
    assert_eq!(hamming_loss(&i, &d, HammingDenominator::LabelSlots).unwrap(), 0.0);
    assert_eq!(macro_f1(&i, &d).unwrap(), 1.0);
    assert_eq!(micro_f1(&i, &d).unwrap(), 1.0);
}

#[test]
fn zero_denominators_give_zero() {
    let i = vec![inst(&[0.2, 0.1], &[])];
    let d = vec![vec![]];
    assert_eq!(macro_f1(&i, &d).unwrap(), 0.0);
    assert_eq!(micro_f1(&i, &d).unwrap(), 0.0);
    assert_eq!(hamming_loss(&i, &d, HammingDenominator::GoldLabels).unwrap(), 0.0);
    assert_eq!(one_error(&i).unwrap(), 1.0);
}

#[test]
fn malformed_inputs_are_rejected() {
    assert!(matches!(one_error(&[]), Err(Error::Usage(_))));
    let i = vec![inst(&[0.2, 0.1], &[0]), inst(&[0.2], &[0])];
    assert!(micro_f1(&i, &[vec![], vec![]]).is_err());
    let i = vec![inst(&[0.2, 0.1], &[0])];
    assert!(macro_f1(&i, &[]).is_err());
    assert!(macro_f1(&i, &[vec![2]]).is_err());
    assert!(evaluate(&i, &[vec![0]], &["a".into()], HammingDenominator::LabelSlots).is_err());
}

#[test]
fn thousand_fuzzed_sets_match_brute_force() {
    let mut r = rng(2024);
    for case in 0..1000 {
        let (l, i, d) = fuzz_case(&mut r);
        let gap = metric_gap(l, &i, &d);
        assert!(gap <= 1e-12, "case {case}: gap {gap}");
    }
}

proptest! {
    #[test]
    fn fuzzed_sets_match_brute_force(seed in any::<u64>()) {
        let (l, i, d) = fuzz_case(&mut rng(seed));
        prop_assert!(metric_gap(l, &i, &d) <= 1e-12);
    }

    #[test]
    fn metrics_ignore_instance_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (_, i, d) = fuzz_case(&mut r);
        let mut order: Vec<usize> = (0..i.len()).collect();
        order.shuffle(&mut r);
        let i2: Vec<EvalInstance> = order.iter().map(|&k| i[k].clone()).collect();
        let d2: Vec<Vec<usize>> = order.iter().map(|&k| d[k].clone()).collect();
        let names: Vec<String> = (0..i[0].scores.len()).map(|k| k.to_string()).collect();
        let a = evaluate(&i, &d, &names, HammingDenominator::LabelSlots).unwrap();
        let b = evaluate(&i2, &d2, &names, HammingDenominator::LabelSlots).unwrap();
        prop_assert!((a.one_error - b.one_error).abs() < 1e-12);
        prop_assert!((a.hamming_loss - b.hamming_loss).abs() < 1e-12);
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        prop_assert!((a.micro_f1 - b.micro_f1).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_unit_interval(seed in any::<u64>()) {
        let (_, i, d) = fuzz_case(&mut rng(seed));
        for v in [
            one_error(&i).unwrap(),
            hamming_loss(&i, &d, HammingDenominator::LabelSlots).unwrap(),
            macro_f1(&i, &d).unwrap(),
            micro_f1(&i, &d).unwrap(),
        ] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
