//! Label-wise contrastive pre-training.
//!
//! For a target document and one of its labels `k`, a candidate list holds
//! one other document carrying `k` and `n - 1` documents without it. The
//! T-Encoder reads the target at label `k`, the C-Encoder reads every
//! candidate at label `k`, and the dot products of the two are trained to
//! pick out the positive under a softmax negative log-likelihood.

use std::time::Instant;

use log::info;
use lwpt_autograd::{AdamConfig, AdamState, Graph, Var};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, EncodedDoc, Layout};
use crate::encoders::{EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::model::Model;

/// Indices into the document list the instance was sampled from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretrainInstance {
    pub target: usize,
    pub label: usize,
    pub candidates: Vec<usize>,
    pub positive: usize,
}

/// Documents holding and lacking each label.
#[derive(Clone, Debug)]
pub struct LabelIndex {
    with: Vec<Vec<usize>>,
    without: Vec<Vec<usize>>,
}

impl LabelIndex {
    pub fn new(docs: &[EncodedDoc], num_labels: usize) -> Result<LabelIndex> {
        let mut with = vec![Vec::new(); num_labels];
        let mut without = vec![Vec::new(); num_labels];
        for (i, d) in docs.iter().enumerate() {
            if let Some(&k) = d.labels.iter().find(|&&k| k >= num_labels) {
                return Err(Error::Lookup(format!("document `{}` has label id {k} of {num_labels}", d.id)));
            }
            for k in 0..num_labels {
                if d.has_label(k) {
                    with[k].push(i);
                } else {
                    without[k].push(i);
                }
            }
        }
        Ok(LabelIndex { with, without })
    }

    pub fn num_labels(&self) -> usize {
        self.with.len()
    }

    pub fn docs_with(&self, k: usize) -> &[usize] {
        &self.with[k]
    }
}

/// Draws one instance for `(target, k)`. Returns `Ok(None)` when no other
/// document carries `k`.
pub fn sample_instance(
    index: &LabelIndex,
    target: usize,
    k: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Option<PretrainInstance>> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 candidates, got {n}")));
    }
    let holders = &index.with[k];
    let others = holders.len() - usize::from(holders.contains(&target));
    if others == 0 {
        return Ok(None);
    }
    let negatives = &index.without[k];
    if negatives.len() < n - 1 {
        return Err(Error::Config(format!(
            "label {k} leaves only {} negative documents for {} candidates",
            negatives.len(),
            n
        )));
    }
    let positive_doc = loop {
        let d = holders[rng.gen_range(0..holders.len())];
        if d != target {
            break d;
        }
    };
    let mut candidates: Vec<usize> = sample(rng, negatives.len(), n - 1).into_iter().map(|i| negatives[i]).collect();
    let positive = rng.gen_range(0..n);
    candidates.insert(positive, positive_doc);
    Ok(Some(PretrainInstance {
        target,
        label: k,
        candidates,
        positive,
    }))
}

/// Endless shuffled pass over all `(document, label)` pairs, one epoch after
/// another. Pairs whose label no other document carries are skipped and
/// counted.
pub struct InstanceStream<'a> {
    index: &'a LabelIndex,
    pairs: Vec<(usize, usize)>,
    n: usize,
    rng: ChaCha8Rng,
    cursor: usize,
    epoch: usize,
    skipped: usize,
}

impl<'a> InstanceStream<'a> {
    pub fn new(docs: &[EncodedDoc], index: &'a LabelIndex, n: usize, seed: u64) -> Result<InstanceStream<'a>> {
        let pairs: Vec<(usize, usize)> = docs
            .iter()
            .enumerate()
            .flat_map(|(i, d)| d.labels.iter().map(move |&k| (i, k)))
            .collect();
        let mut stream = InstanceStream {
            index,
            pairs,
            n,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursor: 0,
            epoch: 0,
            skipped: 0,
        };
        if stream.instances_per_epoch() == 0 {
            return Err(Error::Usage("no label is shared by two documents; nothing to pre-train on".into()));
        }
        stream.pairs.shuffle(&mut stream.rng);
        Ok(stream)
    }

    /// Pairs that yield an instance each epoch.
    pub fn instances_per_epoch(&self) -> usize {
        self.pairs
            .iter()
            .filter(|&&(d, k)| self.index.with[k].iter().any(|&o| o != d))
            .count()
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_instance(&mut self) -> Result<PretrainInstance> {
        loop {
            if self.cursor == self.pairs.len() {
                self.cursor = 0;
                self.epoch += 1;
                self.pairs.shuffle(&mut self.rng);
            }
            let (target, k) = self.pairs[self.cursor];
            self.cursor += 1;
            match sample_instance(self.index, target, k, self.n, &mut self.rng)? {
                Some(inst) => return Ok(inst),
                None => self.skipped += 1,
            }
        }
    }
}

impl Iterator for InstanceStream<'_> {
    type Item = Result<PretrainInstance>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_instance())
    }
}

/// Mean contrastive loss. `q_t: [B, 2H]`, `q_c: [B*n, 2H]` with the `n`
/// candidates of row `b` at rows `b*n .. (b+1)*n`.
pub fn pretrain_loss(g: &mut Graph, q_t: Var, q_c: Var, positives: &[usize]) -> Result<Var> {
    let (b, r) = (g.shape(q_t)[0], g.shape(q_t)[1]);
    if b == 0 || !g.shape(q_c)[0].is_multiple_of(b) || g.shape(q_c)[1] != r {
        return Err(Error::Usage(format!(
            "target shape {:?} does not divide candidate shape {:?}",
            g.shape(q_t),
            g.shape(q_c)
        )));
    }
    let n = g.shape(q_c)[0] / b;
    let qc = g.reshape(q_c, &[b, n, r])?;
    let qt = g.reshape(q_t, &[b, r, 1])?;
    let scores = g.bmm(qc, qt)?;
    let scores = g.reshape(scores, &[b, n])?;
    Ok(g.cross_entropy(scores, positives)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub num_candidates: usize,
    pub batch_size: usize,
    /// Optimizer steps.
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            num_candidates: 3,
            batch_size: 128,
            steps: 3000,
            learning_rate: 0.001,
            seed: 7,
            log_every: 100,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_candidates < 2 {
            return Err(Error::Config(format!("num_candidates must be at least 2, got {}", self.num_candidates)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: Model,
    /// Batch loss at every step.
    pub losses: Vec<f64>,
    pub skipped: usize,
    pub epochs: usize,
    pub seconds: f64,
}

impl PretrainOutcome {
    /// Mean loss over the last `window` steps.
    pub fn tail_loss(&self, window: usize) -> Option<f64> {
        let w = window.min(self.losses.len());
        (w > 0).then(|| self.losses[self.losses.len() - w..].iter().sum::<f64>() / w as f64)
    }
}

/// Builds the target and candidate batches for a group of instances.
pub fn instance_batches(
    docs: &[EncodedDoc],
    instances: &[PretrainInstance],
    layout: Layout,
    num_labels: usize,
) -> Result<(Batch, Batch, Vec<usize>, Vec<usize>)> {
    let targets: Vec<&EncodedDoc> = instances.iter().map(|i| &docs[i.target]).collect();
    let cands: Vec<&EncodedDoc> = instances.iter().flat_map(|i| i.candidates.iter().map(|&c| &docs[c])).collect();
    let t_labels: Vec<usize> = instances.iter().map(|i| i.label).collect();
    let c_labels: Vec<usize> = instances
        .iter()
        .flat_map(|i| std::iter::repeat_n(i.label, i.candidates.len()))
        .collect();
    Ok((
        Batch::from_docs(&targets, layout, num_labels)?,
        Batch::from_docs(&cands, layout, num_labels)?,
        t_labels,
        c_labels,
    ))
}

/// Loss of `model` on a group of instances, recorded on `g`.
pub fn instance_loss(
    g: &mut Graph,
    model: &Model,
    docs: &[EncodedDoc],
    instances: &[PretrainInstance],
    layout: Layout,
    mut mode: Mode,
) -> Result<Var> {
    let (tb, cb, tk, ck) = instance_batches(docs, instances, layout, model.config.num_labels)?;
    let qt = model
        .t_encoder
        .encode(g, &model.params, &tb, &tk, crate::model::reborrow(&mut mode))?;
    let qc = model.c_encoder.encode(g, &model.params, &cb, &ck, mode)?;
    let positives: Vec<usize> = instances.iter().map(|i| i.positive).collect();
    pretrain_loss(g, qt, qc, &positives)
}

/// Seeds for the independent random streams of a run.
pub(crate) fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.gen()
}

/// Trains a freshly initialized encoder pair on `docs` (training split).
pub fn run_pretraining(
    docs: &[EncodedDoc],
    encoder: &EncoderConfig,
    layout: Layout,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1));
    let model = Model::new(encoder.clone(), &mut init_rng)?;
    pretrain_model(model, docs, layout, cfg)
}

/// Continues pre-training an existing model.
pub fn pretrain_model(mut model: Model, docs: &[EncodedDoc], layout: Layout, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if layout.mode != model.config.kind.batch_mode() {
        return Err(Error::Mode(format!(
            "{} needs {:?} batches, layout is {:?}",
            model.config.kind,
            model.config.kind.batch_mode(),
            layout.mode
        )));
    }
    let start = Instant::now();
    let index = LabelIndex::new(docs, model.config.num_labels)?;
    let mut stream = InstanceStream::new(docs, &index, cfg.num_candidates, sub_seed(cfg.seed, 2))?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 3));
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(cfg.learning_rate), &model.params);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let instances = (0..cfg.batch_size)
            .map(|_| stream.next_instance())
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let loss = instance_loss(&mut g, &model, docs, &instances, layout, Mode::Train(&mut dropout_rng))?;
        losses.push(g.value(loss).item());
        g.backward(loss)?;
        g.accumulate_param_grads(&mut model.params);
        adam.step(&mut model.params)?;
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            let window = &losses[losses.len() - cfg.log_every..];
            info!(
                "pretrain step {}/{} mean loss {:.4}",
                step + 1,
                cfg.steps,
                window.iter().sum::<f64>() / window.len() as f64
            );
        }
    }
    Ok(PretrainOutcome {
        model,
        losses,
        skipped: stream.skipped(),
        epochs: stream.epoch(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Mean loss of `model` in eval mode over `count` sampled instances.
pub fn evaluate_loss(
    model: &Model,
    docs: &[EncodedDoc],
    layout: Layout,
    num_candidates: usize,
    count: usize,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let index = LabelIndex::new(docs, model.config.num_labels)?;
    let mut stream = InstanceStream::new(docs, &index, num_candidates, seed)?;
    let (mut total, mut seen) = (0.0, 0usize);
    while seen < count {
        let take = batch_size.min(count - seen);
        let instances = (0..take).map(|_| stream.next_instance()).collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let loss = instance_loss(&mut g, model, docs, &instances, layout, Mode::Eval)?;
        total += g.value(loss).item() * take as f64;
        seen += take;
    }
    Ok(total / count as f64)
}
