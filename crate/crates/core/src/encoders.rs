//! Document encoders: LW-LSTM and HLW-LSTM with one attention context per
//! label, and the LSTM-attention and HAN baselines with a single shared
//! context.
//!
//! Every encoder reads a [`Batch`] and returns either one `[B, 2H]`
//! representation for a requested label per row, or all labels at once as
//! `[B, l, 2H]`. Recurrent states are computed once and reused across labels.

use std::fmt;
use std::str::FromStr;

use lwpt_autograd::init::{xavier_matrix, xavier_uniform};
use lwpt_autograd::{Graph, ParamId, ParamSet, Tensor, TensorError, Var, LAYER_NORM_EPS};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, BatchMode};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    LwLstm,
    HlwLstm,
    LstmAttn,
    Han,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 4] = [EncoderKind::LwLstm, EncoderKind::HlwLstm, EncoderKind::LstmAttn, EncoderKind::Han];

    pub fn is_label_wise(self) -> bool {
        matches!(self, EncoderKind::LwLstm | EncoderKind::HlwLstm)
    }

    pub fn is_hierarchical(self) -> bool {
        matches!(self, EncoderKind::HlwLstm | EncoderKind::Han)
    }

    pub fn batch_mode(self) -> BatchMode {
        if self.is_hierarchical() {
            BatchMode::Hierarchical
        } else {
            BatchMode::Flat
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::LwLstm => "lw_lstm",
            EncoderKind::HlwLstm => "hlw_lstm",
            EncoderKind::LstmAttn => "lstm_attn",
            EncoderKind::Han => "han",
        }
    }

    /// The same architecture with a shared context instead of per-label ones,
    /// or the reverse.
    pub fn counterpart(self) -> EncoderKind {
        match self {
            EncoderKind::LwLstm => EncoderKind::LstmAttn,
            EncoderKind::LstmAttn => EncoderKind::LwLstm,
            EncoderKind::HlwLstm => EncoderKind::Han,
            EncoderKind::Han => EncoderKind::HlwLstm,
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncoderKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown encoder `{s}`; expected one of lw_lstm, hlw_lstm, lstm_attn, han")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden size per direction; representations are `2 * hidden` wide.
    pub hidden: usize,
    pub num_labels: usize,
    /// Depth of the word-level BiLSTM. The sentence-level BiLSTM of the
    /// hierarchical encoders always has one layer.
    pub lstm_layers: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Two word layers for flat encoders, one for hierarchical ones.
    pub fn new(kind: EncoderKind, vocab_size: usize, dim: usize, num_labels: usize) -> Self {
        EncoderConfig {
            kind,
            vocab_size,
            embed_dim: dim,
            hidden: dim,
            num_labels,
            lstm_layers: if kind.is_hierarchical() { 1 } else { 2 },
            dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("embedding and hidden sizes must be at least 1".into()));
        }
        if self.num_labels < 2 {
            return Err(Error::Config(format!("need at least 2 labels, got {}", self.num_labels)));
        }
        if self.lstm_layers == 0 {
            return Err(Error::Config("lstm_layers must be at least 1".into()));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config(format!("vocabulary of {} tokens is too small", self.vocab_size)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn repr_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// Whether dropout is active. Training carries the generator it draws from.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    fn dropout(&mut self, g: &mut Graph, x: Var, p: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => Ok(g.dropout(x, p, true, &mut **rng)?),
        }
    }
}

#[derive(Clone, Debug)]
struct Direction {
    wx: ParamId,
    wh: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Level {
    lstm: Vec<(Direction, Direction)>,
    ln_gain: ParamId,
    ln_bias: ParamId,
    /// `[l, 2H]` for label-wise encoders, `[1, 2H]` for baselines.
    context: ParamId,
}

/// Handles into a [`ParamSet`] for one encoder. Parameter names start with
/// the encoder's prefix, so several encoders can share a set.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    prefix: String,
    embedding: ParamId,
    word: Level,
    sentence: Option<Level>,
}

fn lstm_bias(hidden: usize) -> Tensor {
    let mut b = Tensor::zeros(&[4 * hidden]);
    b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
    b
}

/// Parameter shapes in creation order.
fn layout(config: &EncoderConfig, prefix: &str) -> Vec<(String, Vec<usize>)> {
    let h = config.hidden;
    let contexts = if config.kind.is_label_wise() { config.num_labels } else { 1 };
    let mut out = vec![(format!("{prefix}.embedding"), vec![config.vocab_size, config.embed_dim])];
    let mut level = |name: &str, input: usize, layers: usize| {
        let mut d = input;
        for i in 0..layers {
            for dir in ["fwd", "bwd"] {
                out.push((format!("{prefix}.{name}.lstm{i}.{dir}.wx"), vec![d, 4 * h]));
                out.push((format!("{prefix}.{name}.lstm{i}.{dir}.wh"), vec![h, 4 * h]));
                out.push((format!("{prefix}.{name}.lstm{i}.{dir}.bias"), vec![4 * h]));
            }
            d = 2 * h;
        }
        out.push((format!("{prefix}.{name}.ln.gain"), vec![2 * h]));
        out.push((format!("{prefix}.{name}.ln.bias"), vec![2 * h]));
        out.push((format!("{prefix}.{name}.context"), vec![contexts, 2 * h]));
    };
    level("word", config.embed_dim, config.lstm_layers);
    if config.kind.is_hierarchical() {
        level("sent", 2 * h, 1);
    }
    out
}

fn init_value(name: &str, shape: &[usize], rng: &mut dyn RngCore) -> Tensor {
    if name.ends_with(".ln.gain") {
        // Normalized rows then have unit expected norm, so untrained
        // dot-product scores stay near zero.
        Tensor::full(shape, 1.0 / (shape[0] as f64).sqrt())
    } else if name.ends_with(".ln.bias") {
        Tensor::zeros(shape)
    } else if name.ends_with(".bias") {
        lstm_bias(shape[0] / 4)
    } else if name.ends_with(".context") {
        // Each context is a [2H x 1] column of its own.
        xavier_uniform(shape, shape[1], 1, rng)
    } else if name.ends_with(".embedding") {
        xavier_uniform(shape, shape[1], shape[1], rng)
    } else {
        xavier_matrix(shape[0], shape[1], rng)
    }
}

impl Encoder {
    /// Creates freshly initialized parameters under `prefix`.
    pub fn new(config: EncoderConfig, prefix: &str, params: &mut ParamSet, rng: &mut dyn RngCore) -> Result<Encoder> {
        config.validate()?;
        for (name, shape) in layout(&config, prefix) {
            let value = init_value(&name, &shape, rng);
            params.add(name, value)?;
        }
        Encoder::bind(config, prefix, params)
    }

    /// Attaches to parameters already present in `params`, checking shapes.
    pub fn bind(config: EncoderConfig, prefix: &str, params: &ParamSet) -> Result<Encoder> {
        config.validate()?;
        let find = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let actual = params.get(id).value().shape();
            if actual != shape {
                return Err(Error::Config(format!("parameter `{name}` has shape {actual:?}, expected {shape:?}")));
            }
            Ok(id)
        };
        let shapes: std::collections::HashMap<String, Vec<usize>> = layout(&config, prefix).into_iter().collect();
        let get = |name: String| find(name.clone(), &shapes[&name]);
        let level = |name: &str, layers: usize| -> Result<Level> {
            let dir = |i: usize, d: &str| -> Result<Direction> {
                Ok(Direction {
                    wx: get(format!("{prefix}.{name}.lstm{i}.{d}.wx"))?,
                    wh: get(format!("{prefix}.{name}.lstm{i}.{d}.wh"))?,
                    bias: get(format!("{prefix}.{name}.lstm{i}.{d}.bias"))?,
                })
            };
            Ok(Level {
                lstm: (0..layers).map(|i| Ok((dir(i, "fwd")?, dir(i, "bwd")?))).collect::<Result<_>>()?,
                ln_gain: get(format!("{prefix}.{name}.ln.gain"))?,
                ln_bias: get(format!("{prefix}.{name}.ln.bias"))?,
                context: get(format!("{prefix}.{name}.context"))?,
            })
        };
        Ok(Encoder {
            embedding: get(format!("{prefix}.embedding"))?,
            word: level("word", config.lstm_layers)?,
            sentence: if config.kind.is_hierarchical() { Some(level("sent", 1)?) } else { None },
            prefix: prefix.to_string(),
            config,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Number of scalar parameters this encoder owns.
    pub fn num_scalars(&self, params: &ParamSet) -> usize {
        let p = format!("{}.", self.prefix);
        params
            .iter()
            .filter(|(_, q)| q.name().starts_with(&p))
            .map(|(_, q)| q.value().numel())
            .sum()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.mode != self.config.kind.batch_mode() {
            return Err(Error::Mode(format!(
                "{} expects {:?} batches, got {:?}",
                self.config.kind,
                self.config.kind.batch_mode(),
                batch.mode
            )));
        }
        Ok(())
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if let Some(&k) = labels.iter().find(|&&k| k >= self.config.num_labels) {
            return Err(TensorError::IndexOutOfRange {
                op: "label",
                index: k,
                size: self.config.num_labels,
            }
            .into());
        }
        Ok(())
    }

    /// Stacked BiLSTM followed by layer norm: `[R, T, in] -> [R, T, 2H]`.
    fn bilstm(&self, g: &mut Graph, params: &ParamSet, level: &Level, x: Var, mask: &[bool], mode: &mut Mode) -> Result<Var> {
        let mut x = x;
        for (fwd, bwd) in &level.lstm {
            let f = run_lstm(g, params, fwd, x, mask, false)?;
            let b = run_lstm(g, params, bwd, x, mask, true)?;
            x = g.concat(&[f, b], 2)?;
            x = mode.dropout(g, x, self.config.dropout)?;
        }
        let gain = g.param(params, level.ln_gain);
        let bias = g.param(params, level.ln_bias);
        Ok(g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?)
    }

    /// Word-level states `[R, T, 2H]` after layer norm, where `R` is
    /// documents (flat) or documents × sentences (hierarchical).
    pub fn word_states(&self, g: &mut Graph, params: &ParamSet, batch: &Batch, mode: &mut Mode) -> Result<Var> {
        let rows = batch.size * batch.sentences;
        let table = g.param(params, self.embedding);
        let e = g.gather(table, &batch.word_ids)?;
        let e = g.reshape(e, &[rows, batch.words, self.config.embed_dim])?;
        let e = mode.dropout(g, e, self.config.dropout)?;
        self.bilstm(g, params, &self.word, e, &batch.word_mask, mode)
    }

    /// Representation for label `labels[b]` of each document: `[B, 2H]`.
    pub fn encode(&self, g: &mut Graph, params: &ParamSet, batch: &Batch, labels: &[usize], mut mode: Mode) -> Result<Var> {
        self.check_batch(batch)?;
        self.check_labels(labels)?;
        if labels.len() != batch.size {
            return Err(Error::Usage(format!("{} labels for a batch of {}", labels.len(), batch.size)));
        }
        let label_wise = self.config.kind.is_label_wise();
        let pick = |ks: &[usize]| -> Vec<usize> { if label_wise { ks.to_vec() } else { vec![0; ks.len()] } };
        let h = self.word_states(g, params, batch, &mut mode)?;
        match &self.sentence {
            None => attend_rows(g, params, self.word.context, h, &batch.word_mask, &pick(labels)),
            Some(sent) => {
                let rows: Vec<usize> = labels.iter().flat_map(|&k| std::iter::repeat_n(k, batch.sentences)).collect();
                let s = attend_rows(g, params, self.word.context, h, &attention_word_mask(batch), &pick(&rows))?;
                let s = g.reshape(s, &[batch.size, batch.sentences, self.config.repr_dim()])?;
                let hs = self.bilstm(g, params, sent, s, &batch.sentence_mask, &mut mode)?;
                attend_rows(g, params, sent.context, hs, &batch.sentence_mask, &pick(labels))
            }
        }
    }

    /// Representation for one label across the whole batch: `[B, 2H]`.
    pub fn encode_label(&self, g: &mut Graph, params: &ParamSet, batch: &Batch, k: usize, mode: Mode) -> Result<Var> {
        self.encode(g, params, batch, &vec![k; batch.size], mode)
    }

    /// Every label's representation: `[B, l, 2H]`, row `k` for label `k`.
    pub fn encode_all(&self, g: &mut Graph, params: &ParamSet, batch: &Batch, mut mode: Mode) -> Result<Var> {
        self.check_batch(batch)?;
        let (b, l, r) = (batch.size, self.config.num_labels, self.config.repr_dim());
        if !self.config.kind.is_label_wise() {
            let q = self.encode(g, params, batch, &vec![0; b], mode)?;
            let q = g.reshape(q, &[b, 1, r])?;
            return Ok(g.concat(&vec![q; l], 1)?);
        }
        let h = self.word_states(g, params, batch, &mut mode)?;
        match &self.sentence {
            None => attend_all(g, params, self.word.context, h, &batch.word_mask),
            Some(sent) => {
                let m = batch.sentences;
                let s = attend_all(g, params, self.word.context, h, &attention_word_mask(batch))?;
                let s = g.reshape(s, &[b, m, l, r])?;
                let s = g.permute(s, &[0, 2, 1, 3])?;
                let s = g.reshape(s, &[b * l, m, r])?;
                let mask: Vec<bool> = batch
                    .sentence_mask
                    .chunks(m)
                    .flat_map(|row| std::iter::repeat_n(row, l).flatten().copied())
                    .collect();
                let hs = self.bilstm(g, params, sent, s, &mask, &mut mode)?;
                let ks: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
                let q = attend_rows(g, params, sent.context, hs, &mask, &ks)?;
                Ok(g.reshape(q, &[b, l, r])?)
            }
        }
    }
}

fn run_lstm(g: &mut Graph, params: &ParamSet, d: &Direction, x: Var, mask: &[bool], reverse: bool) -> Result<Var> {
    let wx = g.param(params, d.wx);
    let wh = g.param(params, d.wh);
    let bias = g.param(params, d.bias);
    Ok(g.lstm(x, wx, wh, bias, Some(mask), reverse)?)
}

/// Word mask for attention. A sentence slot with no words attends to its
/// first position so the softmax stays defined; the slot is excluded at the
/// sentence level.
fn attention_word_mask(batch: &Batch) -> Vec<bool> {
    let mut mask = batch.word_mask.clone();
    for (row, &present) in batch.sentence_mask.iter().enumerate() {
        if !present {
            mask[row * batch.words] = true;
        }
    }
    mask
}

/// Attention of row `r` of `h: [R, T, 2H]` with context row `ks[r]`,
/// returning `[R, 2H]`.
fn attend_rows(g: &mut Graph, params: &ParamSet, context: ParamId, h: Var, mask: &[bool], ks: &[usize]) -> Result<Var> {
    let (rows, t, r) = dims3(g, h);
    let table = g.param(params, context);
    let u = g.gather(table, ks)?;
    let u = g.reshape(u, &[rows, r, 1])?;
    let scores = g.bmm(h, u)?;
    let scores = g.reshape(scores, &[rows, t])?;
    let alpha = g.softmax(scores, Some(mask))?;
    let alpha = g.reshape(alpha, &[rows, 1, t])?;
    let q = g.bmm(alpha, h)?;
    Ok(g.reshape(q, &[rows, r])?)
}

/// Attention of every row of `h: [R, T, 2H]` with every context `[l, 2H]`,
/// returning `[R, l, 2H]`.
fn attend_all(g: &mut Graph, params: &ParamSet, context: ParamId, h: Var, mask: &[bool]) -> Result<Var> {
    let (rows, t, r) = dims3(g, h);
    let u = g.param(params, context);
    let l = g.shape(u)[0];
    let flat = g.reshape(h, &[rows * t, r])?;
    let ut = g.transpose(u)?;
    let scores = g.matmul(flat, ut)?;
    let scores = g.reshape(scores, &[rows, t, l])?;
    let scores = g.transpose(scores)?;
    let mask: Vec<bool> = mask.chunks(t).flat_map(|row| std::iter::repeat_n(row, l).flatten().copied()).collect();
    let alpha = g.softmax(scores, Some(&mask))?;
    Ok(g.bmm(alpha, h)?)
}

fn dims3(g: &Graph, v: Var) -> (usize, usize, usize) {
    let s = g.shape(v);
    (s[0], s[1], s[2])
}
