//! The flat run configuration: TOML file values, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{BinScale, ReprSource};
use crate::corpus::Layout;
use crate::encoders::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::metrics::HammingDenominator;
use crate::pipeline::{Init, PipelineConfig};
use crate::pretrain::PretrainConfig;

/// Every tunable value of a run. Unset sizes fall back to defaults that
/// depend on the encoder kind or on whether the corpus is synthetic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,

    pub encoder: EncoderKind,
    pub dim: Option<usize>,
    pub max_words: Option<usize>,
    pub max_sentences: Option<usize>,
    pub min_count: Option<usize>,
    pub lstm_layers: Option<usize>,
    pub dropout: f64,
    pub seed: u64,

    pub candidates: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    pub log_every: usize,

    pub init: Init,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub freeze_encoders: bool,
    pub head_bias: bool,
    pub threshold: f64,
    pub hamming: HammingDenominator,
    pub eval_batch_size: usize,

    pub topk: usize,
    pub display_threshold: f64,
    pub repr: ReprSource,
    pub freq_bins: usize,
    pub bin_scale: BinScale,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pt = PretrainConfig::default();
        let ft = FinetuneConfig::default();
        RunConfig {
            train: None,
            valid: None,
            test: None,
            out: None,
            checkpoint: None,
            encoder: EncoderKind::LwLstm,
            dim: None,
            max_words: None,
            max_sentences: None,
            min_count: None,
            lstm_layers: None,
            dropout: 0.2,
            seed: pt.seed,
            candidates: pt.num_candidates,
            pretrain_steps: pt.steps,
            pretrain_batch_size: pt.batch_size,
            pretrain_learning_rate: pt.learning_rate,
            log_every: pt.log_every,
            init: Init::Pretrained,
            epochs: ft.epochs,
            batch_size: ft.batch_size,
            learning_rate: ft.learning_rate,
            freeze_encoders: ft.freeze_encoders,
            head_bias: ft.head_bias,
            threshold: ft.threshold,
            hamming: HammingDenominator::LabelSlots,
            eval_batch_size: 64,
            topk: 50,
            display_threshold: 0.1,
            repr: ReprSource::TEncoder,
            freq_bins: 5,
            bin_scale: BinScale::Log,
        }
    }
}

impl RunConfig {
    /// Reads a TOML file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train, &mut cfg.valid, &mut cfg.test, &mut cfg.out, &mut cfg.checkpoint]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn dim(&self) -> usize {
        self.dim
            .unwrap_or(if self.encoder.is_hierarchical() { 100 } else { 256 })
    }

    pub fn layout(&self) -> Layout {
        if self.encoder.is_hierarchical() {
            Layout::hierarchical(self.max_sentences.unwrap_or(32), self.max_words.unwrap_or(64))
        } else {
            Layout::flat(self.max_words.unwrap_or(256))
        }
    }

    /// 1 for generated corpora (a truth file sits next to the train split),
    /// 5 otherwise.
    pub fn min_count(&self) -> usize {
        self.min_count.unwrap_or_else(|| {
            let synthetic = self.train.as_deref().and_then(truth_path).is_some_and(|p| p.exists());
            if synthetic {
                1
            } else {
                5
            }
        })
    }

    pub fn encoder_config(&self, vocab_size: usize, num_labels: usize) -> EncoderConfig {
        let mut e = EncoderConfig::new(self.encoder, vocab_size, self.dim(), num_labels);
        if let Some(layers) = self.lstm_layers {
            e.lstm_layers = layers;
        }
        e.dropout = self.dropout;
        e
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            num_candidates: self.candidates,
            batch_size: self.pretrain_batch_size,
            steps: self.pretrain_steps,
            learning_rate: self.pretrain_learning_rate,
            seed: self.seed,
            log_every: self.log_every,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            freeze_encoders: self.freeze_encoders,
            threshold: self.threshold,
            head_bias: self.head_bias,
            seed: self.seed,
        }
    }

    pub fn pipeline_config(&self, vocab_size: usize, num_labels: usize) -> PipelineConfig {
        PipelineConfig {
            encoder: self.encoder_config(vocab_size, num_labels),
            layout: self.layout(),
            init: self.init,
            pretrain: self.pretrain_config(),
            finetune: self.finetune_config(),
            hamming: self.hamming,
            eval_batch_size: self.eval_batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain_config().validate()?;
        self.finetune_config().validate()?;
        let layout = self.layout();
        if layout.max_words == 0 || layout.max_sentences == 0 {
            return Err(Error::Config("max_words and max_sentences must be positive".into()));
        }
        if self.eval_batch_size == 0 || self.freq_bins == 0 {
            return Err(Error::Config("eval_batch_size and freq_bins must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.display_threshold) {
            return Err(Error::Config("display_threshold must be in [0, 1]".into()));
        }
        self.encoder_config(3, 2).validate()
    }

    /// The path stored under `key`, which must be set and exist.
    pub fn require_file(&self, key: &str) -> Result<&Path> {
        let p = match key {
            "train" => &self.train,
            "valid" => &self.valid,
            "test" => &self.test,
            "checkpoint" => &self.checkpoint,
            _ => unreachable!("unknown path key {key}"),
        };
        let p = p
            .as_deref()
            .ok_or_else(|| Error::Usage(format!("`{key}` is required (flag --{key} or config key)")))?;
        if !p.is_file() {
            return Err(Error::Usage(format!("{key} file `{}` does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Usage("`out` is required (flag --out or config key)".into()))
    }
}

/// `<name>.truth.json` for a split file named `<name>.<split>.jsonl`.
pub fn truth_path(split_file: &Path) -> Option<PathBuf> {
    let file = split_file.file_name()?.to_str()?;
    let stem = file.strip_suffix(".jsonl")?;
    let (name, _split) = stem.rsplit_once('.')?;
    Some(split_file.with_file_name(format!("{name}.truth.json")))
}
