//! One-Error, Hamming loss, Macro-F1 and Micro-F1.
//!
//! One-Error reads raw scores; the other three read thresholded label sets.
//! Precision, recall and F1 are 0 whenever their denominator is 0.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub scores: Vec<f64>,
    pub gold: Vec<usize>,
}

/// Normalizer for the Hamming loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HammingDenominator {
    /// `N * l`, every sample-label slot.
    #[default]
    LabelSlots,
    /// Total number of gold labels across samples.
    GoldLabels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub one_error: f64,
    pub hamming_loss: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub per_label: Vec<LabelScore>,
}

/// Index of the highest score; ties go to the smallest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn one_error(instances: &[EvalInstance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Usage("one-error needs at least one instance".into()));
    }
    let wrong = instances
        .iter()
        .filter(|i| !i.scores.is_empty() && !i.gold.contains(&argmax(&i.scores)))
        .count();
    Ok(wrong as f64 / instances.len() as f64)
}

fn check_aligned(instances: &[EvalInstance], decided: &[Vec<usize>]) -> Result<usize> {
    if instances.len() != decided.len() {
        return Err(Error::Usage(format!(
            "{} instances but {} decision sets",
            instances.len(),
            decided.len()
        )));
    }
    let l = instances.first().map_or(0, |i| i.scores.len());
    for (n, (inst, d)) in instances.iter().zip(decided).enumerate() {
        if inst.scores.len() != l {
            return Err(Error::Usage(format!("instance {n} has {} scores, expected {l}", inst.scores.len())));
        }
        if let Some(&k) = inst.gold.iter().chain(d).find(|&&k| k >= l) {
            return Err(Error::Usage(format!("instance {n} refers to label {k} of {l}")));
        }
    }
    Ok(l)
}

fn indicator(set: &[usize], l: usize) -> Vec<bool> {
    let mut v = vec![false; l];
    for &k in set {
        v[k] = true;
    }
    v
}

pub fn hamming_loss(instances: &[EvalInstance], decided: &[Vec<usize>], denominator: HammingDenominator) -> Result<f64> {
    let l = check_aligned(instances, decided)?;
    let mut wrong = 0usize;
    let mut gold_total = 0usize;
    for (inst, d) in instances.iter().zip(decided) {
        let g = indicator(&inst.gold, l);
        let p = indicator(d, l);
        wrong += g.iter().zip(&p).filter(|(a, b)| a != b).count();
        gold_total += g.iter().filter(|&&x| x).count();
    }
    let denom = match denominator {
        HammingDenominator::LabelSlots => instances.len() * l,
        HammingDenominator::GoldLabels => gold_total,
    };
    Ok(if denom == 0 { 0.0 } else { wrong as f64 / denom as f64 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Confusion {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Confusion {
    fn scores(self) -> (f64, f64, f64) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f = ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_);
        (p, r, f)
    }
}

fn confusions(instances: &[EvalInstance], decided: &[Vec<usize>]) -> Result<Vec<Confusion>> {
    let l = check_aligned(instances, decided)?;
    let mut c = vec![Confusion::default(); l];
    for (inst, d) in instances.iter().zip(decided) {
        let g = indicator(&inst.gold, l);
        let p = indicator(d, l);
        for k in 0..l {
            match (g[k], p[k]) {
                (true, true) => c[k].tp += 1,
                (false, true) => c[k].fp += 1,
                (true, false) => c[k].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(c)
}

pub fn macro_f1(instances: &[EvalInstance], decided: &[Vec<usize>]) -> Result<f64> {
    let c = confusions(instances, decided)?;
    if c.is_empty() {
        return Ok(0.0);
    }
    Ok(c.iter().map(|x| x.scores().2).sum::<f64>() / c.len() as f64)
}

pub fn micro_f1(instances: &[EvalInstance], decided: &[Vec<usize>]) -> Result<f64> {
    let c = confusions(instances, decided)?;
    let pooled = c.iter().fold(Confusion::default(), |a, x| Confusion {
        tp: a.tp + x.tp,
        fp: a.fp + x.fp,
        fn_: a.fn_ + x.fn_,
    });
    Ok(pooled.scores().2)
}

/// All four metrics plus per-label scores. `label_names` must have one entry
/// per score column.
pub fn evaluate(
    instances: &[EvalInstance],
    decided: &[Vec<usize>],
    label_names: &[String],
    denominator: HammingDenominator,
) -> Result<MetricsReport> {
    let c = confusions(instances, decided)?;
    if c.len() != label_names.len() {
        return Err(Error::Usage(format!("{} label names for {} score columns", label_names.len(), c.len())));
    }
    let per_label = c
        .iter()
        .zip(label_names)
        .map(|(x, name)| {
            let (precision, recall, f1) = x.scores();
            LabelScore {
                label: name.clone(),
                precision,
                recall,
                f1,
                support: x.tp + x.fn_,
            }
        })
        .collect();
    Ok(MetricsReport {
        one_error: one_error(instances)?,
        hamming_loss: hamming_loss(instances, decided, denominator)?,
        macro_f1: macro_f1(instances, decided)?,
        micro_f1: micro_f1(instances, decided)?,
        per_label,
    })
}

impl MetricsReport {
    /// Aligned text table: the four metrics, then one row per label.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>10} {:>10} {:>10} {:>10}", "OE(-)", "HL(-)", "MacroF1(+)", "MicroF1(+)");
        let _ = writeln!(
            s,
            "{:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            self.one_error, self.hamming_loss, self.macro_f1, self.micro_f1
        );
        let width = self.per_label.iter().map(|p| p.label.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<width$} {:>9} {:>9} {:>9} {:>8}", "label", "precision", "recall", "f1", "support");
        for p in &self.per_label {
            let _ = writeln!(
                s,
                "{:<width$} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                p.label, p.precision, p.recall, p.f1, p.support
            );
        }
        s
    }
}
