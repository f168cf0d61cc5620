//! Optional pre-training, fine-tuning and scoring in one call. The CLI, the
//! sweeps and the examples all run experiments through here.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::corpus::{build_vocabs, encode_docs, Document, EncodedDoc, LabelVocab, Layout, Vocab};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::finetune::{predict_probs, run_finetune, score, FinetuneConfig, FinetuneOutcome};
use crate::metrics::{HammingDenominator, MetricsReport};
use crate::model::Model;
use crate::pretrain::{pretrain_model, sub_seed, PretrainConfig, PretrainOutcome};

/// Encoded train/valid/test splits sharing vocabularies built on train.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub labels: LabelVocab,
    pub train: Vec<EncodedDoc>,
    pub valid: Vec<EncodedDoc>,
    pub test: Vec<EncodedDoc>,
}

impl Dataset {
    pub fn new(train: &[Document], valid: &[Document], test: &[Document], min_count: usize) -> Result<Dataset> {
        let (vocab, labels) = build_vocabs(train, min_count)?;
        Ok(Dataset {
            train: encode_docs(train, &vocab, &labels)?,
            valid: encode_docs(valid, &vocab, &labels)?,
            test: encode_docs(test, &vocab, &labels)?,
            vocab,
            labels,
        })
    }

    pub fn train_label_frequencies(&self) -> BTreeMap<String, usize> {
        analysis::label_frequencies(&self.train, &self.labels)
    }
}

/// Where fine-tuning starts from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Random,
    #[default]
    Pretrained,
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Init::Random => "random",
            Init::Pretrained => "pretrained",
        })
    }
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Init::Random),
            "pretrained" => Ok(Init::Pretrained),
            _ => Err(Error::Config(format!("unknown init `{s}`; expected random or pretrained"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub layout: Layout,
    pub init: Init,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub hamming: HammingDenominator,
    pub eval_batch_size: usize,
}

impl PipelineConfig {
    pub fn new(encoder: EncoderConfig, layout: Layout) -> Self {
        PipelineConfig {
            encoder,
            layout,
            init: Init::Pretrained,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            hamming: HammingDenominator::LabelSlots,
            eval_batch_size: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub pretrain: Option<PretrainOutcome>,
    pub finetune: FinetuneOutcome,
    pub valid_probs: Vec<Vec<f64>>,
    pub test_probs: Vec<Vec<f64>>,
    pub valid_report: MetricsReport,
    pub test_report: MetricsReport,
}

/// Encoders as fine-tuning would start from them without pre-training. The
/// same draw seeds pre-training, so random and pre-trained runs that share a
/// seed start from identical weights.
pub fn initial_model(encoder: &EncoderConfig, pretrain_seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(pretrain_seed, 1));
    Model::new(encoder.clone(), &mut rng)
}

pub fn run_pipeline(data: &Dataset, cfg: &PipelineConfig) -> Result<PipelineResult> {
    let model = initial_model(&cfg.encoder, cfg.pretrain.seed)?;
    let (model, pretrain) = match cfg.init {
        Init::Random => (model, None),
        Init::Pretrained => {
            let out = pretrain_model(model, &data.train, cfg.layout, &cfg.pretrain)?;
            (out.model.clone(), Some(out))
        }
    };
    finish(data, cfg, model, pretrain)
}

/// Fine-tunes and scores an already initialized (possibly pre-trained) model.
pub fn finish(
    data: &Dataset,
    cfg: &PipelineConfig,
    model: Model,
    pretrain: Option<PretrainOutcome>,
) -> Result<PipelineResult> {
    let finetune = run_finetune(model, &data.train, &data.valid, cfg.layout, &cfg.finetune)?;
    let valid_probs = predict_probs(&finetune.model, &data.valid, cfg.layout, cfg.eval_batch_size)?;
    let test_probs = predict_probs(&finetune.model, &data.test, cfg.layout, cfg.eval_batch_size)?;
    let th = cfg.finetune.threshold;
    Ok(PipelineResult {
        valid_report: score(&data.valid, &valid_probs, &data.labels, th, cfg.hamming)?,
        test_report: score(&data.test, &test_probs, &data.labels, th, cfg.hamming)?,
        pretrain,
        finetune,
        valid_probs,
        test_probs,
    })
}
