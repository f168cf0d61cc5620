//! Documents on disk and in memory, vocabularies, batching and synthetic corpora.
//!
//! A corpus file holds one JSON object per line:
//!
//! ```text
//! {"id": "doc-1", "sentences": [["tok", ...], ...], "labels": ["rock", ...]}
//! ```

mod batch;
mod synth;
mod vocab;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use batch::{batchify, Batch, BatchMode, Layout};
pub use synth::{label_name, signature_token, synth_corpus, CorrelationPair, SynthConfig, SynthCorpus, SynthTruth};
pub use vocab::{build_vocabs, LabelVocab, Vocab, PAD, UNK};

use crate::error::{Error, Result};

/// A tokenized, sentence-segmented document with a set of label names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<Vec<String>>,
    #[serde(default)]
    pub labels: BTreeSet<String>,
}

impl Document {
    pub fn num_words(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().flatten().map(String::as_str)
    }
}

/// Whether a file is a training split (labels required) or unlabeled input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Predict,
}

/// Reads a JSON-lines corpus. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn load_corpus(path: &Path, split: Split) -> Result<Vec<Document>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: e.to_string(),
        })?;
        let invalid = |msg: String| Error::Validation {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        if doc.sentences.is_empty() {
            return Err(invalid(format!("document `{}` has no sentences", doc.id)));
        }
        if let Some(j) = doc.sentences.iter().position(Vec::is_empty) {
            return Err(invalid(format!("document `{}` has an empty sentence at index {j}", doc.id)));
        }
        if split == Split::Train && doc.labels.is_empty() {
            return Err(invalid(format!("document `{}` has an empty label set", doc.id)));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in docs {
        let line = serde_json::to_string(d).expect("documents serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A document mapped through a [`Vocab`] and [`LabelVocab`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDoc {
    pub id: String,
    pub sentences: Vec<Vec<usize>>,
    /// Sorted, distinct label ids.
    pub labels: Vec<usize>,
}

impl EncodedDoc {
    pub fn has_label(&self, k: usize) -> bool {
        self.labels.binary_search(&k).is_ok()
    }

    pub fn flat_tokens(&self) -> impl Iterator<Item = usize> + '_ {
        self.sentences.iter().flatten().copied()
    }
}

/// Encodes documents; a gold label missing from `labels` is a lookup error.
pub fn encode_docs(docs: &[Document], vocab: &Vocab, labels: &LabelVocab) -> Result<Vec<EncodedDoc>> {
    docs.iter().map(|d| encode_doc(d, vocab, labels)).collect()
}

pub fn encode_doc(doc: &Document, vocab: &Vocab, labels: &LabelVocab) -> Result<EncodedDoc> {
    let sentences = doc
        .sentences
        .iter()
        .map(|s| s.iter().map(|t| vocab.encode(t)).collect())
        .collect();
    let mut ids = doc
        .labels
        .iter()
        .map(|l| {
            labels
                .id(l)
                .ok_or_else(|| Error::Lookup(format!("document `{}` has unknown label `{l}`", doc.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    ids.sort_unstable();
    Ok(EncodedDoc {
        id: doc.id.clone(),
        sentences,
        labels: ids,
    })
}

/// Splits documents in order into 70% train, 15% validation and the rest test.
pub fn split_70_15_15(docs: &[Document]) -> (Vec<Document>, Vec<Document>, Vec<Document>) {
    let n_train = docs.len() * 70 / 100;
    let n_valid = docs.len() * 15 / 100;
    (
        docs[..n_train].to_vec(),
        docs[n_train..n_train + n_valid].to_vec(),
        docs[n_train + n_valid..].to_vec(),
    )
}

/// Corpus statistics: N, vocabulary size, label count, mean labels and words per document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_docs: usize,
    pub vocab_size: usize,
    pub num_labels: usize,
    pub avg_labels_per_doc: f64,
    pub avg_words_per_doc: f64,
    pub label_frequency: BTreeMap<String, usize>,
}

pub fn corpus_stats(docs: &[Document]) -> Result<CorpusStats> {
    if docs.is_empty() {
        return Err(Error::Usage("corpus statistics need at least one document".into()));
    }
    let mut vocab = BTreeSet::new();
    let mut label_frequency = BTreeMap::new();
    let (mut labels, mut words) = (0usize, 0usize);
    for d in docs {
        vocab.extend(d.tokens());
        for l in &d.labels {
            *label_frequency.entry(l.clone()).or_insert(0) += 1;
        }
        labels += d.labels.len();
        words += d.num_words();
    }
    let n = docs.len() as f64;
    Ok(CorpusStats {
        num_docs: docs.len(),
        vocab_size: vocab.len(),
        num_labels: label_frequency.len(),
        avg_labels_per_doc: labels as f64 / n,
        avg_words_per_doc: words as f64 / n,
        label_frequency,
    })
}
