use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Document;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token vocabulary with `PAD = 0` and `UNK = 1` reserved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Builds a vocabulary from non-reserved tokens, in id order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(tokens);
        Vocab::from(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn encode(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&i) if i > UNK => i,
            _ => UNK,
        }
    }

    pub fn decode(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> String {
        hash_list(&self.tokens)
    }
}

/// Label names in id order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LabelVocab {
    fn from(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        LabelVocab { names, index }
    }
}

impl From<LabelVocab> for Vec<String> {
    fn from(v: LabelVocab) -> Self {
        v.names
    }
}

impl LabelVocab {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Lookup that lists the valid names on failure.
    pub fn require(&self, name: &str) -> Result<usize> {
        self.id(name)
            .ok_or_else(|| Error::Lookup(format!("unknown label `{name}`; valid labels: {}", self.names.join(", "))))
    }

    pub fn hash(&self) -> String {
        hash_list(&self.names)
    }
}

fn hash_list(items: &[String]) -> String {
    let mut h = Sha256::new();
    for it in items {
        h.update(it.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn ranked(counts: HashMap<&str, usize>, min_count: usize) -> Vec<String> {
    let mut items: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    items.into_iter().map(|(t, _)| t.to_string()).collect()
}

/// Builds token and label vocabularies. Tokens seen fewer than `min_count`
/// times map to UNK. Ids are assigned by descending frequency, ties broken
/// lexicographically, so they do not depend on document order.
pub fn build_vocabs(docs: &[Document], min_count: usize) -> Result<(Vocab, LabelVocab)> {
    if docs.is_empty() {
        return Err(Error::Usage("cannot build vocabularies from an empty corpus".into()));
    }
    let mut tokens: HashMap<&str, usize> = HashMap::new();
    let mut labels: HashMap<&str, usize> = HashMap::new();
    for d in docs {
        for t in d.tokens() {
            if t == PAD_TOKEN || t == UNK_TOKEN {
                continue;
            }
            *tokens.entry(t).or_insert(0) += 1;
        }
        for l in &d.labels {
            *labels.entry(l).or_insert(0) += 1;
        }
    }
    let vocab = Vocab::from_tokens(ranked(tokens, min_count.max(1)));
    let label_vocab = LabelVocab::from(ranked(labels, 1));
    Ok((vocab, label_vocab))
}
