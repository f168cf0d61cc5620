use lwpt_autograd::Tensor;
use serde::{Deserialize, Serialize};

use super::{EncodedDoc, PAD};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Sentences concatenated into one word sequence per document.
    Flat,
    /// Words grouped per sentence: `[B × m × t]`.
    Hierarchical,
}

/// Truncation limits: `max_words` is `t` (per document when flat, per
/// sentence when hierarchical) and `max_sentences` is `m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub mode: BatchMode,
    pub max_words: usize,
    pub max_sentences: usize,
}

impl Layout {
    pub fn flat(max_words: usize) -> Self {
        Layout {
            mode: BatchMode::Flat,
            max_words,
            max_sentences: 1,
        }
    }

    pub fn hierarchical(max_sentences: usize, max_words: usize) -> Self {
        Layout {
            mode: BatchMode::Hierarchical,
            max_words,
            max_sentences,
        }
    }
}

/// Padded word ids and masks for a group of documents.
///
/// Ids are laid out `[size × sentences × words]`; in flat mode `sentences`
/// is 1. Padding extends only to the longest document (or sentence) in the
/// batch, capped by the layout limits. Truncation keeps the prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub mode: BatchMode,
    pub size: usize,
    pub sentences: usize,
    pub words: usize,
    pub word_ids: Vec<usize>,
    pub word_mask: Vec<bool>,
    pub sentence_mask: Vec<bool>,
    /// Multi-hot `[size × num_labels]`.
    pub labels: Tensor,
    pub label_sets: Vec<Vec<usize>>,
    pub doc_ids: Vec<String>,
}

impl Batch {
    pub fn from_docs(docs: &[&EncodedDoc], layout: Layout, num_labels: usize) -> Result<Batch> {
        if layout.max_words == 0 || layout.max_sentences == 0 {
            return Err(Error::Config(format!(
                "max_words and max_sentences must be at least 1, got {} and {}",
                layout.max_words, layout.max_sentences
            )));
        }
        if docs.is_empty() {
            return Err(Error::Usage("cannot build an empty batch".into()));
        }
        let rows: Vec<Vec<Vec<usize>>> = match layout.mode {
            BatchMode::Flat => docs
                .iter()
                .map(|d| vec![d.flat_tokens().take(layout.max_words).collect()])
                .collect(),
            BatchMode::Hierarchical => docs
                .iter()
                .map(|d| {
                    d.sentences
                        .iter()
                        .take(layout.max_sentences)
                        .map(|s| s.iter().take(layout.max_words).copied().collect())
                        .collect()
                })
                .collect(),
        };
        let sentences = rows.iter().map(Vec::len).max().unwrap_or(1).max(1);
        let words = rows.iter().flatten().map(Vec::len).max().unwrap_or(1).max(1);
        let b = docs.len();
        let mut word_ids = vec![PAD; b * sentences * words];
        let mut word_mask = vec![false; b * sentences * words];
        let mut sentence_mask = vec![false; b * sentences];
        for (i, doc) in rows.iter().enumerate() {
            for (j, sent) in doc.iter().enumerate() {
                sentence_mask[i * sentences + j] = !sent.is_empty();
                let base = (i * sentences + j) * words;
                for (k, &tok) in sent.iter().enumerate() {
                    word_ids[base + k] = tok;
                    word_mask[base + k] = true;
                }
            }
        }
        let mut labels = Tensor::zeros(&[b, num_labels]);
        for (i, d) in docs.iter().enumerate() {
            for &k in &d.labels {
                if k >= num_labels {
                    return Err(Error::Lookup(format!("label id {k} outside {num_labels} labels")));
                }
                labels.data_mut()[i * num_labels + k] = 1.0;
            }
        }
        Ok(Batch {
            mode: layout.mode,
            size: b,
            sentences,
            words,
            word_ids,
            word_mask,
            sentence_mask,
            labels,
            label_sets: docs.iter().map(|d| d.labels.clone()).collect(),
            doc_ids: docs.iter().map(|d| d.id.clone()).collect(),
        })
    }

    pub fn num_labels(&self) -> usize {
        self.labels.shape()[1]
    }
}

/// Splits documents into consecutive batches of at most `batch_size`.
pub fn batchify(docs: &[EncodedDoc], layout: Layout, num_labels: usize, batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    docs.chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&EncodedDoc> = chunk.iter().collect();
            Batch::from_docs(&refs, layout, num_labels)
        })
        .collect()
}
