//! The `lwpt` command line: synth, pretrain, finetune, eval, analyze, sweep.
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 for usage and
//! configuration errors.

mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::{truth_path, RunConfig};

use crate::analysis::{self, BinScale, ReprSource};
use crate::checkpoint::{file_hash, write_atomic, Checkpoint, Stage, FORMAT_VERSION};
use crate::corpus::{
    corpus_stats, encode_docs, load_corpus, split_70_15_15, synth_corpus, write_corpus, CorpusStats, Document,
    EncodedDoc, LabelVocab, Split, SynthConfig, SynthTruth,
};
use crate::encoders::EncoderKind;
use crate::error::{Error, Result};
use crate::finetune::{predictions, prediction_instances, read_predictions, write_predictions};
use crate::metrics::{self, HammingDenominator, MetricsReport};
use crate::pipeline::{self, Dataset, Init, PipelineConfig, PipelineResult};
use crate::pretrain::{pretrain_model, PretrainOutcome};

#[derive(Debug, Parser)]
#[command(name = "lwpt", version, about = "Label-wise contrastive pre-training for multi-label text classification")]
pub struct Cli {
    /// Log progress (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with planted label correlations.
    Synth(SynthArgs),
    /// Contrastively pre-train the T- and C-Encoder on the train split.
    Pretrain(RunArgs),
    /// Train the classifier, from random or pre-trained encoders.
    Finetune(RunArgs),
    /// Score a predictions file.
    Eval(EvalArgs),
    /// Neighbor label frequencies, label correlation and frequency-binned F1.
    Analyze(AnalyzeArgs),
    /// Run the encoder/pre-training ablation and the candidate-count grid.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// File name prefix for the splits and the truth file.
    #[arg(long, default_value = "synth")]
    pub name: String,
    #[arg(long)]
    pub num_docs: Option<usize>,
    #[arg(long)]
    pub num_labels: Option<usize>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Flags shared by the training and analysis commands. Each one overrides
/// the config-file key of the same name.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Flat TOML file with run settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Output directory; the run manifest is written at its root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// lw_lstm, hlw_lstm, lstm_attn or han.
    #[arg(long)]
    pub encoder: Option<EncoderKind>,
    /// Embedding and hidden size d.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub max_words: Option<usize>,
    #[arg(long)]
    pub max_sentences: Option<usize>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub lstm_layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Candidates per pre-training instance (positive plus negatives).
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub pretrain_batch_size: Option<usize>,
    #[arg(long)]
    pub pretrain_learning_rate: Option<f64>,
    #[arg(long)]
    pub log_every: Option<usize>,
    /// random or pretrained.
    #[arg(long)]
    pub init: Option<Init>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub freeze_encoders: bool,
    /// Drop the classifier bias term.
    #[arg(long)]
    pub no_head_bias: bool,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub hamming: Option<HammingArg>,
    #[arg(long)]
    pub eval_batch_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum HammingArg {
    LabelSlots,
    GoldLabels,
}

impl From<HammingArg> for HammingDenominator {
    fn from(h: HammingArg) -> Self {
        match h {
            HammingArg::LabelSlots => HammingDenominator::LabelSlots,
            HammingArg::GoldLabels => HammingDenominator::GoldLabels,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ReprArg {
    TEncoder,
    CEncoder,
    Fused,
}

impl From<ReprArg> for ReprSource {
    fn from(r: ReprArg) -> Self {
        match r {
            ReprArg::TEncoder => ReprSource::TEncoder,
            ReprArg::CEncoder => ReprSource::CEncoder,
            ReprArg::Fused => ReprSource::Fused,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScaleArg {
    Log,
    Linear,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Label order of the score columns; defaults to labels.json next to the
    /// predictions file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "label-slots")]
    pub hamming: HammingArg,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Documents to index; defaults to the test split, then the train split.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Document id for a neighbor table.
    #[arg(long, requires = "label")]
    pub query: Option<String>,
    /// Label whose representation the neighbor search uses.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub topk: Option<usize>,
    /// Label frequencies below this are left out of the printed table.
    #[arg(long)]
    pub display_threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub repr: Option<ReprArg>,
    /// Planted truth file; found automatically next to generated splits.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Predictions whose per-label F1 is binned by training frequency.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long, value_enum)]
    pub bin_scale: Option<ScaleArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// Without pre-training, with it, and the single-context baseline with it.
    Ablation,
    /// Pre-trained runs over the candidate counts.
    Candidates,
    All,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value = "all")]
    pub grid: Grid,
    #[arg(long, value_delimiter = ',', default_value = "3,4,5")]
    pub candidate_grid: Vec<usize>,
    /// Seeds per row, counting up from --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

impl RunArgs {
    /// Config file values (or defaults) overridden by any flags given.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    c.$f = v.clone().into();
                }
            )*};
        }
        set!(train, valid, test, out, checkpoint, dim, max_words, max_sentences, min_count, lstm_layers);
        set!(encoder, dropout, seed, candidates, pretrain_steps, pretrain_batch_size, pretrain_learning_rate);
        set!(log_every, init, epochs, batch_size, learning_rate, threshold, hamming, eval_batch_size);
        if self.freeze_encoders {
            c.freeze_encoders = true;
        }
        if self.no_head_bias {
            c.head_bias = false;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Record of one command invocation, written atomically as
/// `<out>/manifest.json` when the command finishes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub corpus: BTreeMap<String, CorpusStats>,
    /// SHA-256 of every file the command wrote, by file name.
    pub artifacts: BTreeMap<String, String>,
    pub metrics: serde_json::Value,
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, config: &impl Serialize) -> Self {
        RunManifest {
            format_version: FORMAT_VERSION,
            command: command.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            corpus: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            metrics: json!({}),
            timings: BTreeMap::new(),
        }
    }

    fn record(&mut self, dir: &Path, name: &str) -> Result<()> {
        self.artifacts.insert(name.to_string(), file_hash(&dir.join(name))?);
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_atomic(&dir.join("manifest.json"), &bytes)
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    exit_code(run(cli))
}

/// Prints a failed command's error and maps the outcome to an exit code.
pub fn exit_code(outcome: Result<()>) -> i32 {
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Pretrain(a) => cmd_pretrain(&a.resolve()?),
        Command::Finetune(a) => cmd_finetune(&a.resolve()?),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let start = Instant::now();
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(v) = a.num_docs {
        cfg.num_docs = v;
    }
    if let Some(v) = a.num_labels {
        cfg.num_labels = v;
        // Default pairs refer to labels 0..4; keep only those that still exist.
        cfg.pairs.retain(|p| p.a < v && p.b < v);
    }
    if let Some(v) = a.noise_rate {
        cfg.noise_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let corpus = synth_corpus(&cfg)?;
    create_dir(&a.out)?;
    let (train, valid, test) = split_70_15_15(&corpus.docs);
    let mut manifest = RunManifest::new("synth", &cfg);
    for (split, docs) in [("train", &train), ("valid", &valid), ("test", &test)] {
        let file = format!("{}.{split}.jsonl", a.name);
        write_corpus(&a.out.join(&file), docs)?;
        manifest.record(&a.out, &file)?;
        manifest.corpus.insert(split.to_string(), corpus_stats(docs)?);
    }
    let truth_file = format!("{}.truth.json", a.name);
    write_json(&a.out.join(&truth_file), &corpus.truth)?;
    manifest.record(&a.out, &truth_file)?;
    manifest.timings.insert("total".into(), start.elapsed().as_secs_f64());
    manifest.write(&a.out)?;
    println!(
        "wrote {} train / {} valid / {} test documents to {}",
        train.len(),
        valid.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

fn load_split(cfg: &RunConfig, key: &str) -> Result<Vec<Document>> {
    load_corpus(cfg.require_file(key)?, Split::Train)
}

fn pretrain_summary(out: &PretrainOutcome) -> serde_json::Value {
    let head = out.losses.len().min(10);
    json!({
        "steps": out.losses.len(),
        "initial_loss": out.losses[..head].iter().sum::<f64>() / head.max(1) as f64,
        "final_loss": out.tail_loss(100),
        "epochs": out.epochs,
        "skipped_instances": out.skipped,
    })
}

/// Pre-trains on `train` and saves `<out>/pretrained.ckpt` plus the loss
/// curve. Returns the checkpoint.
fn pretrain_into(cfg: &RunConfig, train: &[Document], out_dir: &Path, manifest: &mut RunManifest) -> Result<Checkpoint> {
    let data = Dataset::new(train, &[], &[], cfg.min_count())?;
    let encoder = cfg.encoder_config(data.vocab.len(), data.labels.len());
    let pt = cfg.pretrain_config();
    let model = pipeline::initial_model(&encoder, pt.seed)?;
    let outcome = pretrain_model(model, &data.train, cfg.layout(), &pt)?;
    let summary = pretrain_summary(&outcome);
    let ck = Checkpoint {
        stage: Stage::Pretrained,
        model: outcome.model.clone(),
        layout: cfg.layout(),
        vocab: data.vocab,
        labels: data.labels,
        extra: json!({ "pretrain": summary, "candidates": pt.num_candidates, "seed": pt.seed }),
    };
    ck.save(&out_dir.join("pretrained.ckpt"))?;
    manifest.record(out_dir, "pretrained.ckpt")?;
    write_losses(&out_dir.join("pretrain_loss.csv"), &outcome.losses)?;
    manifest.record(out_dir, "pretrain_loss.csv")?;
    manifest.timings.insert("pretrain".into(), outcome.seconds);
    manifest.metrics["pretrain"] = summary;
    Ok(ck)
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e))
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(["step", "loss"]).map_err(csv_error(path))?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:.8}")]).map_err(csv_error(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    let train = load_split(cfg, "train")?;
    let out = cfg.require_out()?;
    create_dir(out)?;
    let mut manifest = RunManifest::new("pretrain", cfg);
    manifest.corpus.insert("train".into(), corpus_stats(&train)?);
    pretrain_into(cfg, &train, out, &mut manifest)?;
    manifest.timings.insert("total".into(), start.elapsed().as_secs_f64());
    manifest.write(out)?;
    let p = &manifest.metrics["pretrain"];
    println!(
        "pre-trained {} steps: loss {:.4} -> {:.4}; checkpoint {}",
        p["steps"],
        p["initial_loss"].as_f64().unwrap_or(f64::NAN),
        p["final_loss"].as_f64().unwrap_or(f64::NAN),
        out.join("pretrained.ckpt").display()
    );
    Ok(())
}

fn encode_with(ck: &Checkpoint, docs: &[Document]) -> Result<Vec<EncodedDoc>> {
    encode_docs(docs, &ck.vocab, &ck.labels)
}

/// The checkpoint fine-tuning starts from: `--checkpoint`, else
/// `<out>/pretrained.ckpt`, else a fresh pre-training run saved there.
fn starting_checkpoint(cfg: &RunConfig, train: &[Document], out: &Path, manifest: &mut RunManifest) -> Result<Checkpoint> {
    let path = match &cfg.checkpoint {
        Some(_) => Some(cfg.require_file("checkpoint")?.to_path_buf()),
        None => Some(out.join("pretrained.ckpt")).filter(|p| p.is_file()),
    };
    let ck = match path {
        Some(p) => {
            let ck = Checkpoint::load(&p)?;
            manifest.artifacts.insert("init_checkpoint".into(), file_hash(&p)?);
            ck
        }
        None => pretrain_into(cfg, train, out, manifest)?,
    };
    if ck.model.config.kind != cfg.encoder {
        return Err(Error::Config(format!(
            "checkpoint holds a {} encoder but the run asks for {}",
            ck.model.config.kind, cfg.encoder
        )));
    }
    Ok(ck)
}

pub fn cmd_finetune(cfg: &RunConfig) -> Result<()> {
    let start = Instant::now();
    let train_docs = load_split(cfg, "train")?;
    let valid_docs = load_split(cfg, "valid")?;
    let test_docs = load_split(cfg, "test")?;
    let out = cfg.require_out()?;
    create_dir(out)?;
    let mut manifest = RunManifest::new("finetune", cfg);
    for (split, docs) in [("train", &train_docs), ("valid", &valid_docs), ("test", &test_docs)] {
        manifest.corpus.insert(split.into(), corpus_stats(docs)?);
    }
    let (data, model, layout) = match cfg.init {
        Init::Random => {
            let data = Dataset::new(&train_docs, &valid_docs, &test_docs, cfg.min_count())?;
            let encoder = cfg.encoder_config(data.vocab.len(), data.labels.len());
            let model = pipeline::initial_model(&encoder, cfg.seed)?;
            (data, model, cfg.layout())
        }
        Init::Pretrained => {
            let ck = starting_checkpoint(cfg, &train_docs, out, &mut manifest)?;
            let data = Dataset {
                train: encode_with(&ck, &train_docs)?,
                valid: encode_with(&ck, &valid_docs)?,
                test: encode_with(&ck, &test_docs)?,
                vocab: ck.vocab,
                labels: ck.labels,
            };
            (data, ck.model, ck.layout)
        }
    };
    let mut pcfg = cfg.pipeline_config(data.vocab.len(), data.labels.len());
    pcfg.encoder = model.config.clone();
    pcfg.layout = layout;
    let result = pipeline::finish(&data, &pcfg, model, None)?;
    write_finetune_artifacts(out, &data, &pcfg, &result, cfg.init, &mut manifest)?;
    manifest.timings.insert("total".into(), start.elapsed().as_secs_f64());
    manifest.write(out)?;
    println!("best epoch {} (valid Micro-F1 {:.4})", result.finetune.best_epoch, result.finetune.best_valid_micro_f1);
    println!("test:\n{}", result.test_report.table());
    Ok(())
}

fn write_finetune_artifacts(
    out: &Path,
    data: &Dataset,
    cfg: &PipelineConfig,
    r: &PipelineResult,
    init: Init,
    manifest: &mut RunManifest,
) -> Result<()> {
    let ft = &r.finetune;
    let ck = Checkpoint {
        stage: Stage::Finetuned,
        model: ft.model.clone(),
        layout: cfg.layout,
        vocab: data.vocab.clone(),
        labels: data.labels.clone(),
        extra: json!({ "init": init, "best_epoch": ft.best_epoch, "history": ft.history }),
    };
    ck.save(&out.join("finetuned.ckpt"))?;
    manifest.record(out, "finetuned.ckpt")?;
    write_json(&out.join("labels.json"), &data.labels)?;
    manifest.record(out, "labels.json")?;
    let th = cfg.finetune.threshold;
    for (split, docs, probs) in [("valid", &data.valid, &r.valid_probs), ("test", &data.test, &r.test_probs)] {
        let file = format!("predictions.{split}.jsonl");
        write_predictions(&out.join(&file), &predictions(docs, probs, &data.labels, th))?;
        manifest.record(out, &file)?;
    }
    let metrics = json!({
        "best_epoch": ft.best_epoch,
        "best_valid_micro_f1": ft.best_valid_micro_f1,
        "history": ft.history,
        "valid": r.valid_report,
        "test": r.test_report,
    });
    write_json(&out.join("metrics.json"), &metrics)?;
    manifest.record(out, "metrics.json")?;
    manifest.metrics["finetune"] = metrics;
    manifest.timings.insert("finetune".into(), ft.seconds);
    Ok(())
}

/// Scores a predictions file; prints the metric table and optionally writes
/// the report as JSON.
pub fn cmd_eval(a: &EvalArgs) -> Result<MetricsReport> {
    let labels_path = match &a.labels {
        Some(p) => p.clone(),
        None => a.predictions.with_file_name("labels.json"),
    };
    let labels: LabelVocab = read_json(&labels_path)?;
    let preds = read_predictions(&a.predictions)?;
    let (inst, decided) = prediction_instances(&preds, &labels)?;
    let report = metrics::evaluate(&inst, &decided, labels.names(), a.hamming.into())?;
    print!("{}", report.table());
    if let Some(out) = &a.output {
        write_json(out, &report)?;
    }
    Ok(report)
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let start = Instant::now();
    let mut cfg = a.run.resolve()?;
    if let Some(v) = a.topk {
        cfg.topk = v;
    }
    if let Some(v) = a.display_threshold {
        cfg.display_threshold = v;
    }
    if let Some(v) = a.repr {
        cfg.repr = v.into();
    }
    if let Some(v) = a.bins {
        cfg.freq_bins = v;
    }
    if let Some(v) = a.bin_scale {
        cfg.bin_scale = match v {
            ScaleArg::Log => BinScale::Log,
            ScaleArg::Linear => BinScale::Linear,
        };
    }
    cfg.validate()?;
    let ck_path = cfg.require_file("checkpoint")?;
    let ck = Checkpoint::load(ck_path)?;
    let corpus_path = match (&a.corpus, &cfg.test, &cfg.train) {
        (Some(p), _, _) | (None, Some(p), _) | (None, None, Some(p)) => p.clone(),
        _ => return Err(Error::Usage("give --corpus (or --test / --train) to analyze".into())),
    };
    if !corpus_path.is_file() {
        return Err(Error::Usage(format!("corpus file `{}` does not exist", corpus_path.display())));
    }
    let out = cfg.require_out()?.to_path_buf();
    create_dir(&out)?;
    let raw = load_corpus(&corpus_path, Split::Train)?;
    let docs = encode_with(&ck, &raw)?;
    let mut manifest = RunManifest::new("analyze", &cfg);
    manifest.artifacts.insert("checkpoint".into(), file_hash(ck_path)?);
    manifest.corpus.insert("analyzed".into(), corpus_stats(&raw)?);
    let index = analysis::build_index(&ck.model, &docs, ck.layout, cfg.repr, cfg.eval_batch_size)?;

    if let (Some(query), Some(label)) = (&a.query, &a.label) {
        let k = ck.labels.require(label)?;
        let table = analysis::neighbors(&index, query, k, cfg.topk)?;
        let shown = table.shown(&ck.labels, cfg.display_threshold);
        println!("top {} neighbors of `{query}` under `{label}`:", cfg.topk);
        for (name, f) in &shown {
            println!("  {name:<24} {:>5.1}%", 100.0 * f);
        }
        let freq: BTreeMap<&str, f64> = ck
            .labels
            .names()
            .iter()
            .map(String::as_str)
            .zip(table.label_frequency.iter().copied())
            .collect();
        let body = json!({
            "query": table.query,
            "label": label,
            "topk": cfg.topk,
            "display_threshold": cfg.display_threshold,
            "neighbors": table.neighbors,
            "label_frequency": freq,
            "shown": shown,
        });
        write_json(&out.join("neighbors.json"), &body)?;
        manifest.record(&out, "neighbors.json")?;
    }

    let truth_file = a.truth.clone().or_else(|| truth_path(&corpus_path).filter(|p| p.is_file()));
    let planted = match &truth_file {
        Some(p) => Some(analysis::align_truth(&read_json::<SynthTruth>(p)?, &ck.labels)?),
        None => None,
    };
    let topk = cfg.topk.min(index.len().saturating_sub(1));
    let report = analysis::correlation_report(&index, &ck.labels, planted, topk)?;
    if let Some(rho) = report.rank_correlation {
        println!("rank correlation with planted P(b|a): {rho:.4}");
        manifest.metrics["rank_correlation"] = json!(rho);
    }
    write_json(&out.join("correlation.json"), &report)?;
    manifest.record(&out, "correlation.json")?;

    if let Some(pred_path) = &a.predictions {
        let train = encode_with(&ck, &load_split(&cfg, "train")?)?;
        let preds = read_predictions(pred_path)?;
        let (inst, decided) = prediction_instances(&preds, &ck.labels)?;
        let scores = metrics::evaluate(&inst, &decided, ck.labels.names(), cfg.hamming)?;
        let freq = analysis::label_frequencies(&train, &ck.labels);
        let binned = analysis::frequency_f1_report(&freq, &scores, cfg.freq_bins, cfg.bin_scale)?;
        write_json(&out.join("freq_f1.json"), &binned)?;
        binned.write_csv(&out.join("freq_f1.csv"))?;
        manifest.record(&out, "freq_f1.json")?;
        manifest.record(&out, "freq_f1.csv")?;
    }
    manifest.timings.insert("total".into(), start.elapsed().as_secs_f64());
    manifest.write(&out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: String,
    pub encoder: EncoderKind,
    pub init: Init,
    pub candidates: Option<usize>,
    pub seed: u64,
    pub one_error: f64,
    pub hamming_loss: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub best_epoch: usize,
    pub checkpoint_sha256: String,
}

/// (encoder, init, candidates) for every grid row, without duplicates.
pub fn sweep_plan(grid: Grid, encoder: EncoderKind, candidates: usize, candidate_grid: &[usize]) -> Vec<(EncoderKind, Init, usize)> {
    let mut rows = Vec::new();
    if matches!(grid, Grid::Ablation | Grid::All) {
        rows.push((encoder, Init::Random, candidates));
        rows.push((encoder, Init::Pretrained, candidates));
        rows.push((encoder.counterpart(), Init::Pretrained, candidates));
    }
    if matches!(grid, Grid::Candidates | Grid::All) {
        for &n in candidate_grid {
            rows.push((encoder, Init::Pretrained, n));
        }
    }
    let mut seen = Vec::new();
    rows.retain(|r| {
        let fresh = !seen.contains(r);
        seen.push(*r);
        fresh
    });
    rows
}

fn row_name(encoder: EncoderKind, init: Init, n: usize) -> String {
    match init {
        Init::Random => format!("{encoder}"),
        Init::Pretrained => format!("{encoder}+pt-n{n}"),
    }
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = a.run.resolve()?;
    let train = load_split(&cfg, "train")?;
    let valid = load_split(&cfg, "valid")?;
    let test = load_split(&cfg, "test")?;
    let out = cfg.require_out()?.to_path_buf();
    create_dir(&out)?;
    if a.candidate_grid.iter().any(|&n| n < 2) || a.seeds == 0 {
        return Err(Error::Config("candidate counts must be at least 2 and seeds at least 1".into()));
    }
    let data = Dataset::new(&train, &valid, &test, cfg.min_count())?;
    let mut manifest = RunManifest::new("sweep", &json!({ "run": cfg, "grid": format!("{:?}", a.grid), "candidate_grid": a.candidate_grid, "seeds": a.seeds }));
    for (split, docs) in [("train", &train), ("valid", &valid), ("test", &test)] {
        manifest.corpus.insert(split.into(), corpus_stats(docs)?);
    }
    let plan = sweep_plan(a.grid, cfg.encoder, cfg.candidates, &a.candidate_grid);
    let mut rows = Vec::new();
    for (encoder, init, n) in plan {
        for seed in cfg.seed..cfg.seed + a.seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.encoder = encoder;
            run_cfg.init = init;
            run_cfg.candidates = n;
            run_cfg.seed = seed;
            let pcfg = run_cfg.pipeline_config(data.vocab.len(), data.labels.len());
            let r = pipeline::run_pipeline(&data, &pcfg)?;
            let run = row_name(encoder, init, n);
            let ck = Checkpoint {
                stage: Stage::Finetuned,
                model: r.finetune.model.clone(),
                layout: pcfg.layout,
                vocab: data.vocab.clone(),
                labels: data.labels.clone(),
                extra: json!({ "init": init, "best_epoch": r.finetune.best_epoch }),
            };
            let file = format!("{run}-seed{seed}.ckpt");
            ck.save(&out.join(&file))?;
            manifest.record(&out, &file)?;
            let m = &r.test_report;
            log::info!("{run} seed {seed}: Macro-F1 {:.4} Micro-F1 {:.4}", m.macro_f1, m.micro_f1);
            manifest.timings.insert(format!("{run}-seed{seed}"), r.finetune.seconds + r.pretrain.as_ref().map_or(0.0, |p| p.seconds));
            rows.push(SweepRow {
                run,
                encoder,
                init,
                candidates: (init == Init::Pretrained).then_some(n),
                seed,
                one_error: m.one_error,
                hamming_loss: m.hamming_loss,
                macro_f1: m.macro_f1,
                micro_f1: m.micro_f1,
                best_epoch: r.finetune.best_epoch,
                checkpoint_sha256: manifest.artifacts[&file].clone(),
            });
        }
    }
    write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    manifest.record(&out, "sweep.csv")?;
    write_json(&out.join("sweep.json"), &rows)?;
    manifest.record(&out, "sweep.json")?;
    print!("{}", sweep_table(&rows));
    manifest.metrics = json!({ "rows": rows });
    manifest.timings.insert("total".into(), start.elapsed().as_secs_f64());
    manifest.write(&out)
}

fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(["run", "encoder", "init", "candidates", "seed", "one_error", "hamming_loss", "macro_f1", "micro_f1", "best_epoch"])
        .map_err(csv_error(path))?;
    for r in rows {
        w.write_record([
            r.run.clone(),
            r.encoder.to_string(),
            r.init.to_string(),
            r.candidates.map(|n| n.to_string()).unwrap_or_default(),
            r.seed.to_string(),
            format!("{:.6}", r.one_error),
            format!("{:.6}", r.hamming_loss),
            format!("{:.6}", r.macro_f1),
            format!("{:.6}", r.micro_f1),
            r.best_epoch.to_string(),
        ])
        .map_err(csv_error(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Comparison table in the OE(-) HL(-) MacroF1(+) MicroF1(+) orientation.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let width = rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
    let mut s = format!(
        "{:<width$} {:>5} {:>8} {:>8} {:>10} {:>10}\n",
        "run", "seed", "OE(-)", "HL(-)", "MacroF1(+)", "MicroF1(+)"
    );
    for r in rows {
        s += &format!(
            "{:<width$} {:>5} {:>8.4} {:>8.4} {:>10.4} {:>10.4}\n",
            r.run, r.seed, r.one_error, r.hamming_loss, r.macro_f1, r.micro_f1
        );
    }
    s
}
