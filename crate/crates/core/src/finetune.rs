//! Classification with the fused label-wise representation.
//!
//! Each document's T-Encoder and C-Encoder outputs for every label are
//! concatenated per label, flattened, and mapped to one sigmoid output per
//! label. Training minimizes binary cross-entropy summed over labels and
//! averaged over documents.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::info;
use lwpt_autograd::{AdamConfig, AdamState, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, EncodedDoc, LabelVocab, Layout};
use crate::encoders::Mode;
use crate::error::{Error, Result};
use crate::metrics::{self, EvalInstance, HammingDenominator, MetricsReport};
use crate::model::{fused_dim, Model};
use crate::pretrain::sub_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Train only the head; encoders stay as initialized.
    pub freeze_encoders: bool,
    pub threshold: f64,
    pub head_bias: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.001,
            freeze_encoders: false,
            threshold: 0.5,
            head_bias: true,
            seed: 11,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must be in (0, 1), got {}", self.threshold)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Labels with probability at least `threshold`; the argmax alone when none
/// qualifies.
pub fn decide_labels(probs: &[f64], threshold: f64) -> Vec<usize> {
    let picked: Vec<usize> = (0..probs.len()).filter(|&k| probs[k] >= threshold).collect();
    if picked.is_empty() && !probs.is_empty() {
        vec![metrics::argmax(probs)]
    } else {
        picked
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_micro_f1: f64,
    pub valid_macro_f1: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub history: Vec<EpochLog>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_valid_micro_f1: f64,
    pub seconds: f64,
}

/// Label probabilities for every document, in eval mode.
pub fn predict_probs(model: &Model, docs: &[EncodedDoc], layout: Layout, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(batch_size.max(1)) {
        let refs: Vec<&EncodedDoc> = chunk.iter().collect();
        let batch = Batch::from_docs(&refs, layout, model.config.num_labels)?;
        let mut g = Graph::new();
        let fused = model.fuse(&mut g, &batch, Mode::Eval)?;
        let p = model.predict(&mut g, fused)?;
        let l = model.config.num_labels;
        out.extend(g.value(p).data().chunks(l).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Flattened fused representations `[N, l*4H]` in eval mode.
fn fused_features(model: &Model, docs: &[EncodedDoc], layout: Layout, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let width = fused_dim(&model.config);
    let mut out = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(batch_size.max(1)) {
        let refs: Vec<&EncodedDoc> = chunk.iter().collect();
        let batch = Batch::from_docs(&refs, layout, model.config.num_labels)?;
        let mut g = Graph::new();
        let fused = model.fuse(&mut g, &batch, Mode::Eval)?;
        out.extend(g.value(fused).data().chunks(width).map(<[f64]>::to_vec));
    }
    Ok(out)
}

fn head_probs(model: &Model, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let (l, width) = (model.config.num_labels, fused_dim(&model.config));
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![features.len(), l, width / l], features.concat())?);
    let p = model.predict(&mut g, x)?;
    Ok(g.value(p).data().chunks(l).map(<[f64]>::to_vec).collect())
}

fn multi_hot(docs: &[&EncodedDoc], l: usize) -> Tensor {
    let mut t = Tensor::zeros(&[docs.len(), l]);
    for (i, d) in docs.iter().enumerate() {
        for &k in &d.labels {
            t.data_mut()[i * l + k] = 1.0;
        }
    }
    t
}

pub fn eval_instances(docs: &[EncodedDoc], probs: &[Vec<f64>]) -> Vec<EvalInstance> {
    docs.iter()
        .zip(probs)
        .map(|(d, p)| EvalInstance {
            scores: p.clone(),
            gold: d.labels.clone(),
        })
        .collect()
}

/// Metrics of probability rows against the documents' gold labels.
pub fn score(
    docs: &[EncodedDoc],
    probs: &[Vec<f64>],
    labels: &LabelVocab,
    threshold: f64,
    hamming: HammingDenominator,
) -> Result<MetricsReport> {
    let inst = eval_instances(docs, probs);
    let decided: Vec<Vec<usize>> = probs.iter().map(|p| decide_labels(p, threshold)).collect();
    metrics::evaluate(&inst, &decided, labels.names(), hamming)
}

fn valid_f1(docs: &[EncodedDoc], probs: &[Vec<f64>], threshold: f64) -> Result<(f64, f64)> {
    let inst = eval_instances(docs, probs);
    let decided: Vec<Vec<usize>> = probs.iter().map(|p| decide_labels(p, threshold)).collect();
    Ok((metrics::micro_f1(&inst, &decided)?, metrics::macro_f1(&inst, &decided)?))
}

/// Trains the head (and the encoders unless frozen) and keeps the epoch with
/// the best validation Micro-F1. A head is added when `model` has none.
pub fn run_finetune(
    mut model: Model,
    train: &[EncodedDoc],
    valid: &[EncodedDoc],
    layout: Layout,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if layout.mode != model.config.kind.batch_mode() {
        return Err(Error::Mode(format!(
            "{} needs {:?} batches, layout is {:?}",
            model.config.kind,
            model.config.kind.batch_mode(),
            layout.mode
        )));
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Usage("fine-tuning needs non-empty train and validation sets".into()));
    }
    let start = Instant::now();
    let l = model.config.num_labels;
    if model.head.is_none() {
        let mut head_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 4));
        model.add_head(cfg.head_bias, &mut head_rng)?;
    }
    model.set_encoders_trainable(!cfg.freeze_encoders);
    let (train_feats, valid_feats) = if cfg.freeze_encoders {
        (
            Some(fused_features(&model, train, layout, cfg.batch_size)?),
            Some(fused_features(&model, valid, layout, cfg.batch_size)?),
        )
    } else {
        (None, None)
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 5));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 6));
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(cfg.learning_rate), &model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let docs: Vec<&EncodedDoc> = idx.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let fused = match &train_feats {
                Some(f) => {
                    let rows: Vec<f64> = idx.iter().flat_map(|&i| f[i].iter().copied()).collect();
                    let width = fused_dim(&model.config);
                    g.constant(Tensor::new(vec![idx.len(), l, width / l], rows)?)
                }
                None => {
                    let batch = Batch::from_docs(&docs, layout, l)?;
                    model.fuse(&mut g, &batch, Mode::Train(&mut dropout_rng))?
                }
            };
            let probs = model.predict(&mut g, fused)?;
            let loss = g.bce(probs, &multi_hot(&docs, l))?;
            total += g.value(loss).item() * idx.len() as f64;
            seen += idx.len();
            g.backward(loss)?;
            g.accumulate_param_grads(&mut model.params);
            adam.step(&mut model.params)?;
        }
        let probs = match &valid_feats {
            Some(f) => head_probs(&model, f)?,
            None => predict_probs(&model, valid, layout, cfg.batch_size)?,
        };
        let (micro, macro_) = valid_f1(valid, &probs, cfg.threshold)?;
        info!(
            "finetune epoch {epoch}/{} train loss {:.4} valid micro-F1 {micro:.4} macro-F1 {macro_:.4}",
            cfg.epochs,
            total / seen as f64
        );
        history.push(EpochLog {
            epoch,
            train_loss: total / seen as f64,
            valid_micro_f1: micro,
            valid_macro_f1: macro_,
        });
        if best.as_ref().is_none_or(|(b, _, _)| micro > *b) {
            best = Some((micro, epoch, model.clone()));
        }
    }
    let (best_valid_micro_f1, best_epoch, model) = match best {
        Some(b) => b,
        None => {
            let probs = predict_probs(&model, valid, layout, cfg.batch_size)?;
            let (micro, _) = valid_f1(valid, &probs, cfg.threshold)?;
            (micro, 0, model)
        }
    };
    let mut model = model;
    model.set_encoders_trainable(true);
    Ok(FinetuneOutcome {
        model,
        history,
        best_epoch,
        best_valid_micro_f1,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub scores: Vec<f64>,
    pub predicted: Vec<String>,
    pub gold: Vec<String>,
}

pub fn predictions(docs: &[EncodedDoc], probs: &[Vec<f64>], labels: &LabelVocab, threshold: f64) -> Vec<Prediction> {
    let names = |ks: &[usize]| ks.iter().map(|&k| labels.name(k).to_string()).collect();
    docs.iter()
        .zip(probs)
        .map(|(d, p)| Prediction {
            id: d.id.clone(),
            scores: p.clone(),
            predicted: names(&decide_labels(p, threshold)),
            gold: names(&d.labels),
        })
        .collect()
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in preds {
        let line = serde_json::to_string(p).expect("predictions serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

/// Converts predictions back to metric inputs. Scores must follow the order
/// of `labels`.
pub fn prediction_instances(preds: &[Prediction], labels: &LabelVocab) -> Result<(Vec<EvalInstance>, Vec<Vec<usize>>)> {
    let mut inst = Vec::with_capacity(preds.len());
    let mut decided = Vec::with_capacity(preds.len());
    for p in preds {
        if p.scores.len() != labels.len() {
            return Err(Error::Usage(format!(
                "prediction `{}` has {} scores for {} labels",
                p.id,
                p.scores.len(),
                labels.len()
            )));
        }
        let ids = |names: &[String]| names.iter().map(|n| labels.require(n)).collect::<Result<Vec<_>>>();
        inst.push(EvalInstance {
            scores: p.scores.clone(),
            gold: ids(&p.gold)?,
        });
        decided.push(ids(&p.predicted)?);
    }
    Ok((inst, decided))
}
