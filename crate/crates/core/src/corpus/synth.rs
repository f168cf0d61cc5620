//! Synthetic multi-label corpora with planted label co-occurrence.
//!
//! Label sets are drawn in two stages. Each label is first switched on
//! independently with its base probability. Then every planted pair
//! `(a, b, s)` is applied in order: when `a` is present and `b` absent, `b`
//! is added with probability `s`. Sets with no labels or more than
//! `max_labels` are rejected and redrawn.
//!
//! Text is built from per-label signature tokens (2 to 4 draws per label)
//! mixed with filler tokens, shuffled and cut into short sentences.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Document;
use crate::error::{Error, Result};

/// Exact enumeration is used up to this many labels; Monte Carlo beyond.
const EXACT_LABEL_LIMIT: usize = 16;
const MONTE_CARLO_DRAWS: usize = 200_000;
const MAX_REJECTIONS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPair {
    pub a: usize,
    pub b: usize,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_labels: usize,
    pub num_docs: usize,
    pub pairs: Vec<CorrelationPair>,
    pub signature_tokens_per_label: usize,
    /// Expected fraction of filler tokens in a document, in `[0, 1)`.
    pub noise_rate: f64,
    pub filler_vocab: usize,
    /// Base probability shared by every label unless `label_probs` is set.
    pub base_rate: f64,
    pub label_probs: Option<Vec<f64>>,
    pub max_labels: usize,
    pub max_sentence_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_labels: 6,
            num_docs: 2000,
            pairs: vec![
                CorrelationPair { a: 0, b: 1, strength: 0.9 },
                CorrelationPair { a: 2, b: 3, strength: 0.7 },
            ],
            signature_tokens_per_label: 5,
            noise_rate: 0.5,
            filler_vocab: 60,
            base_rate: 0.25,
            label_probs: None,
            max_labels: 3,
            max_sentence_len: 8,
            seed: 13,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_labels < 2 {
            return bad(format!("synthetic corpora need at least 2 labels, got {}", self.num_labels));
        }
        if self.num_docs == 0 {
            return bad("num_docs must be positive".into());
        }
        if self.signature_tokens_per_label == 0 {
            return bad("signature_tokens_per_label must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate must be in [0, 1), got {}", self.noise_rate));
        }
        if self.noise_rate > 0.0 && self.filler_vocab == 0 {
            return bad("noise needs a non-empty filler vocabulary".into());
        }
        if self.max_labels == 0 || self.max_sentence_len == 0 {
            return bad("max_labels and max_sentence_len must be positive".into());
        }
        for p in &self.pairs {
            if p.a >= self.num_labels || p.b >= self.num_labels || p.a == p.b {
                return bad(format!("invalid correlation pair ({}, {})", p.a, p.b));
            }
            if !(0.0..=1.0).contains(&p.strength) {
                return bad(format!("pair strength must be in [0, 1], got {}", p.strength));
            }
        }
        let probs = self.probs();
        if probs.len() != self.num_labels {
            return bad(format!("label_probs has {} entries for {} labels", probs.len(), self.num_labels));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || probs.iter().all(|&p| p == 0.0) {
            return bad("label probabilities must lie in [0, 1] and not all be zero".into());
        }
        Ok(())
    }

    fn probs(&self) -> Vec<f64> {
        self.label_probs.clone().unwrap_or_else(|| vec![self.base_rate; self.num_labels])
    }
}

pub fn label_name(k: usize) -> String {
    format!("label{k}")
}

pub fn signature_token(k: usize, j: usize) -> String {
    format!("sig{k}_{j}")
}

fn filler_token(j: usize) -> String {
    format!("w{j}")
}

/// Ground truth of the generating process, keyed by label name order in
/// `label_names`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub label_names: Vec<String>,
    pub pairs: Vec<CorrelationPair>,
    /// `strength[a][b]` as planted; zero where no pair was given.
    pub strength: Vec<Vec<f64>>,
    pub marginals: Vec<f64>,
    /// `joint[a][b] = P(a and b)`; the diagonal holds the marginals.
    pub joint: Vec<Vec<f64>>,
    /// `correlation[a][b] = P(b | a)`: the planted correlation matrix.
    pub correlation: Vec<Vec<f64>>,
    pub signatures: BTreeMap<String, Vec<String>>,
    pub exact: bool,
}

impl SynthTruth {
    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.label_names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub docs: Vec<Document>,
    pub truth: SynthTruth,
}

fn draw_labels(cfg: &SynthConfig, probs: &[f64], rng: &mut impl Rng) -> Result<Vec<bool>> {
    for _ in 0..MAX_REJECTIONS {
        let mut on: Vec<bool> = probs.iter().map(|&p| rng.gen::<f64>() < p).collect();
        for p in &cfg.pairs {
            if on[p.a] && !on[p.b] && rng.gen::<f64>() < p.strength {
                on[p.b] = true;
            }
        }
        let count = on.iter().filter(|&&x| x).count();
        if count >= 1 && count <= cfg.max_labels {
            return Ok(on);
        }
    }
    Err(Error::Config(format!(
        "label probabilities almost never yield between 1 and {} labels",
        cfg.max_labels
    )))
}

fn doc_tokens(cfg: &SynthConfig, on: &[bool], rng: &mut impl Rng) -> Vec<Vec<String>> {
    let mut tokens = Vec::new();
    for (k, _) in on.iter().enumerate().filter(|(_, &x)| x) {
        for _ in 0..rng.gen_range(2..=4) {
            tokens.push(signature_token(k, rng.gen_range(0..cfg.signature_tokens_per_label)));
        }
    }
    if cfg.noise_rate > 0.0 {
        let expected = tokens.len() as f64 * cfg.noise_rate / (1.0 - cfg.noise_rate);
        let mut count = expected.floor() as usize;
        if rng.gen::<f64>() < expected.fract() {
            count += 1;
        }
        for _ in 0..count {
            tokens.push(filler_token(rng.gen_range(0..cfg.filler_vocab)));
        }
    }
    tokens.shuffle(rng);
    let mut sentences = Vec::new();
    let mut rest = tokens.as_slice();
    while !rest.is_empty() {
        let len = rng.gen_range(1..=cfg.max_sentence_len).min(rest.len());
        sentences.push(rest[..len].to_vec());
        rest = &rest[len..];
    }
    sentences
}

/// Distribution over accepted label sets as `(set bitmask, probability)`.
fn exact_set_distribution(cfg: &SynthConfig, probs: &[f64]) -> Vec<(u64, f64)> {
    let l = cfg.num_labels;
    let mut dist: BTreeMap<u64, f64> = BTreeMap::new();
    for mask in 0u64..(1 << l) {
        let p: f64 = (0..l)
            .map(|k| if mask >> k & 1 == 1 { probs[k] } else { 1.0 - probs[k] })
            .product();
        if p > 0.0 {
            dist.insert(mask, p);
        }
    }
    for pair in &cfg.pairs {
        let mut next: BTreeMap<u64, f64> = BTreeMap::new();
        for (&mask, &p) in &dist {
            if mask >> pair.a & 1 == 1 && mask >> pair.b & 1 == 0 {
                *next.entry(mask | 1 << pair.b).or_insert(0.0) += p * pair.strength;
                *next.entry(mask).or_insert(0.0) += p * (1.0 - pair.strength);
            } else {
                *next.entry(mask).or_insert(0.0) += p;
            }
        }
        dist = next;
    }
    let accepted: Vec<(u64, f64)> = dist
        .into_iter()
        .filter(|(m, p)| *p > 0.0 && (1..=cfg.max_labels as u32).contains(&m.count_ones()))
        .collect();
    let z: f64 = accepted.iter().map(|(_, p)| p).sum();
    accepted.into_iter().map(|(m, p)| (m, p / z)).collect()
}

fn truth(cfg: &SynthConfig, probs: &[f64]) -> Result<SynthTruth> {
    let l = cfg.num_labels;
    let mut joint = vec![vec![0.0; l]; l];
    let exact = l <= EXACT_LABEL_LIMIT;
    if exact {
        for (mask, p) in exact_set_distribution(cfg, probs) {
            for a in (0..l).filter(|a| mask >> a & 1 == 1) {
                for b in (0..l).filter(|b| mask >> b & 1 == 1) {
                    joint[a][b] += p;
                }
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7275_7468);
        for _ in 0..MONTE_CARLO_DRAWS {
            let on = draw_labels(cfg, probs, &mut rng)?;
            let idx: Vec<usize> = (0..l).filter(|&k| on[k]).collect();
            for &a in &idx {
                for &b in &idx {
                    joint[a][b] += 1.0;
                }
            }
        }
        joint.iter_mut().flatten().for_each(|v| *v /= MONTE_CARLO_DRAWS as f64);
    }
    let marginals: Vec<f64> = (0..l).map(|k| joint[k][k]).collect();
    let correlation = (0..l)
        .map(|a| {
            (0..l)
                .map(|b| if marginals[a] > 0.0 { joint[a][b] / marginals[a] } else { 0.0 })
                .collect()
        })
        .collect();
    let mut strength = vec![vec![0.0; l]; l];
    for p in &cfg.pairs {
        strength[p.a][p.b] = p.strength;
    }
    let signatures = (0..l)
        .map(|k| {
            let toks = (0..cfg.signature_tokens_per_label).map(|j| signature_token(k, j)).collect();
            (label_name(k), toks)
        })
        .collect();
    Ok(SynthTruth {
        label_names: (0..l).map(label_name).collect(),
        pairs: cfg.pairs.clone(),
        strength,
        marginals,
        joint,
        correlation,
        signatures,
        exact,
    })
}

/// Generates a corpus and its ground truth from `cfg.seed`.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let probs = cfg.probs();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = (cfg.num_docs.max(2) - 1).to_string().len();
    let mut docs = Vec::with_capacity(cfg.num_docs);
    for i in 0..cfg.num_docs {
        let on = draw_labels(cfg, &probs, &mut rng)?;
        let sentences = doc_tokens(cfg, &on, &mut rng);
        let labels: BTreeSet<String> = (0..cfg.num_labels).filter(|&k| on[k]).map(label_name).collect();
        docs.push(Document {
            id: format!("synth-{i:0width$}"),
            sentences,
            labels,
        });
    }
    Ok(SynthCorpus {
        docs,
        truth: truth(cfg, &probs)?,
    })
}
