//! Nearest-neighbor label statistics over label-wise representations, and
//! F1 broken down by training-set label frequency.

use std::collections::BTreeMap;
use std::path::Path;

use lwpt_autograd::Graph;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, EncodedDoc, LabelVocab, Layout, SynthTruth};
use crate::encoders::Mode;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::Model;

/// Which encoder output the index holds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprSource {
    #[default]
    TEncoder,
    CEncoder,
    Fused,
}

impl std::str::FromStr for ReprSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t_encoder" => Ok(ReprSource::TEncoder),
            "c_encoder" => Ok(ReprSource::CEncoder),
            "fused" => Ok(ReprSource::Fused),
            _ => Err(Error::Config(format!("unknown representation `{s}`; expected t_encoder, c_encoder or fused"))),
        }
    }
}

/// Eval-mode representations of every document under every label.
#[derive(Clone, Debug)]
pub struct ReprIndex {
    pub ids: Vec<String>,
    pub gold: Vec<Vec<usize>>,
    pub num_labels: usize,
    pub dim: usize,
    /// `reprs[k]` is `[N × dim]`, row-major.
    pub reprs: Vec<Vec<f64>>,
}

impl ReprIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, k: usize, doc: usize) -> &[f64] {
        &self.reprs[k][doc * self.dim..(doc + 1) * self.dim]
    }

    pub fn position(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|d| d == id)
            .ok_or_else(|| Error::Lookup(format!("unknown document id `{id}`")))
    }
}

pub fn build_index(
    model: &Model,
    docs: &[EncodedDoc],
    layout: Layout,
    source: ReprSource,
    batch_size: usize,
) -> Result<ReprIndex> {
    if layout.mode != model.config.kind.batch_mode() {
        return Err(Error::Config(format!(
            "{} checkpoint needs {:?} batches",
            model.config.kind,
            model.config.kind.batch_mode()
        )));
    }
    let l = model.config.num_labels;
    let dim = match source {
        ReprSource::Fused => 2 * model.config.repr_dim(),
        _ => model.config.repr_dim(),
    };
    let mut reprs = vec![Vec::with_capacity(docs.len() * dim); l];
    for chunk in docs.chunks(batch_size.max(1)) {
        let refs: Vec<&EncodedDoc> = chunk.iter().collect();
        let batch = Batch::from_docs(&refs, layout, l)?;
        let mut g = Graph::new();
        let q = match source {
            ReprSource::TEncoder => model.t_encoder.encode_all(&mut g, &model.params, &batch, Mode::Eval)?,
            ReprSource::CEncoder => model.c_encoder.encode_all(&mut g, &model.params, &batch, Mode::Eval)?,
            ReprSource::Fused => model.fuse(&mut g, &batch, Mode::Eval)?,
        };
        let data = g.value(q).data();
        for b in 0..chunk.len() {
            for (k, r) in reprs.iter_mut().enumerate() {
                let start = (b * l + k) * dim;
                r.extend_from_slice(&data[start..start + dim]);
            }
        }
    }
    Ok(ReprIndex {
        ids: docs.iter().map(|d| d.id.clone()).collect(),
        gold: docs.iter().map(|d| d.labels.clone()).collect(),
        num_labels: l,
        dim,
        reprs,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborTable {
    pub query: String,
    pub label: usize,
    pub neighbors: Vec<Neighbor>,
    /// Fraction of the neighbors carrying each label, indexed by label id.
    pub label_frequency: Vec<f64>,
}

impl NeighborTable {
    /// Labels at or above `threshold`, most frequent first.
    pub fn shown(&self, labels: &LabelVocab, threshold: f64) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self
            .label_frequency
            .iter()
            .enumerate()
            .filter(|(_, &f)| f >= threshold)
            .map(|(k, &f)| (labels.name(k).to_string(), f))
            .collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        rows
    }
}

/// Indices of the `top_k` documents most cosine-similar to `query` under
/// label `k`'s representation, excluding the query. Ties go to the smaller
/// index.
fn ranked(index: &ReprIndex, query: usize, k: usize, top_k: usize, norms: &[f64]) -> Vec<(usize, f64)> {
    let q = index.row(k, query);
    let mut scored: Vec<(usize, f64)> = (0..index.len())
        .filter(|&d| d != query)
        .map(|d| {
            let r = index.row(k, d);
            let dot: f64 = q.iter().zip(r).map(|(x, y)| x * y).sum();
            let denom = norms[query] * norms[d];
            let c = if denom == 0.0 { 0.0 } else { (dot / denom).clamp(-1.0, 1.0) };
            (d, c)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(top_k);
    scored
}

fn norms(index: &ReprIndex, k: usize) -> Vec<f64> {
    (0..index.len())
        .map(|d| index.row(k, d).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

fn frequencies(index: &ReprIndex, hits: &[(usize, f64)]) -> Vec<f64> {
    let mut freq = vec![0.0; index.num_labels];
    for &(d, _) in hits {
        for &k in &index.gold[d] {
            freq[k] += 1.0;
        }
    }
    let n = hits.len().max(1) as f64;
    freq.iter_mut().for_each(|f| *f /= n);
    freq
}

pub fn neighbors(index: &ReprIndex, query_id: &str, k: usize, top_k: usize) -> Result<NeighborTable> {
    let query = index.position(query_id)?;
    if k >= index.num_labels {
        return Err(Error::Lookup(format!("label id {k} outside {} labels", index.num_labels)));
    }
    if top_k == 0 || top_k >= index.len() {
        return Err(Error::Usage(format!("top-k must be in [1, {}), got {top_k}", index.len())));
    }
    let hits = ranked(index, query, k, top_k, &norms(index, k));
    Ok(NeighborTable {
        query: query_id.to_string(),
        label: k,
        label_frequency: frequencies(index, &hits),
        neighbors: hits
            .iter()
            .map(|&(d, c)| Neighbor {
                id: index.ids[d].clone(),
                cosine: c,
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub label_names: Vec<String>,
    pub top_k: usize,
    /// `measured[a][b]`: mean fraction of neighbors carrying `b`, over
    /// queries carrying `a`, using `a`-wise representations.
    pub measured: Vec<Vec<f64>>,
    pub queries: Vec<usize>,
    /// Planted `P(b | a)` aligned to the label vocabulary, when known.
    pub planted: Option<Vec<Vec<f64>>>,
    /// Spearman correlation between measured and planted off-diagonal entries.
    pub rank_correlation: Option<f64>,
}

pub fn correlation_report(
    index: &ReprIndex,
    labels: &LabelVocab,
    planted: Option<Vec<Vec<f64>>>,
    top_k: usize,
) -> Result<CorrelationReport> {
    let l = index.num_labels;
    if top_k == 0 || top_k >= index.len() {
        return Err(Error::Usage(format!("top-k must be in [1, {}), got {top_k}", index.len())));
    }
    let mut measured = vec![vec![0.0; l]; l];
    let mut queries = vec![0usize; l];
    for a in 0..l {
        let ns = norms(index, a);
        for q in (0..index.len()).filter(|&d| index.gold[d].contains(&a)) {
            let freq = frequencies(index, &ranked(index, q, a, top_k, &ns));
            for (m, f) in measured[a].iter_mut().zip(freq) {
                *m += f;
            }
            queries[a] += 1;
        }
        if queries[a] > 0 {
            measured[a].iter_mut().for_each(|m| *m /= queries[a] as f64);
        }
    }
    let rank_correlation = match &planted {
        Some(p) => {
            if p.len() != l || p.iter().any(|r| r.len() != l) {
                return Err(Error::Usage(format!("planted matrix must be {l}×{l}")));
            }
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for a in (0..l).filter(|&a| queries[a] > 0) {
                for b in (0..l).filter(|&b| b != a) {
                    xs.push(measured[a][b]);
                    ys.push(p[a][b]);
                }
            }
            Some(spearman(&xs, &ys))
        }
        None => None,
    };
    Ok(CorrelationReport {
        label_names: labels.names().to_vec(),
        top_k,
        measured,
        queries,
        planted,
        rank_correlation,
    })
}

/// The generator's `P(b | a)` re-indexed to `labels`.
pub fn align_truth(truth: &SynthTruth, labels: &LabelVocab) -> Result<Vec<Vec<f64>>> {
    let map: Vec<usize> = labels
        .names()
        .iter()
        .map(|n| {
            truth
                .label_index(n)
                .ok_or_else(|| Error::Lookup(format!("label `{n}` is missing from the truth file")))
        })
        .collect::<Result<_>>()?;
    Ok(map.iter().map(|&a| map.iter().map(|&b| truth.correlation[a][b]).collect()).collect())
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinScale {
    #[default]
    Log,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqBin {
    /// Inclusive frequency bounds of the bin.
    pub lower: f64,
    pub upper: f64,
    pub labels: Vec<String>,
    pub mean_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqF1Report {
    pub scale: BinScale,
    pub bins: Vec<FreqBin>,
}

/// Training-set document count per label name.
pub fn label_frequencies(train: &[EncodedDoc], labels: &LabelVocab) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = labels.names().iter().map(|n| (n.clone(), 0)).collect();
    for d in train {
        for &k in &d.labels {
            *counts.get_mut(labels.name(k)).expect("label in vocabulary") += 1;
        }
    }
    counts
}

/// Buckets labels into `num_bins` equal-width bins over (log) training
/// frequency and averages F1 per bin.
pub fn frequency_f1_report(
    frequencies: &BTreeMap<String, usize>,
    report: &MetricsReport,
    num_bins: usize,
    scale: BinScale,
) -> Result<FreqF1Report> {
    if num_bins == 0 {
        return Err(Error::Config("need at least one frequency bin".into()));
    }
    let mut items = Vec::with_capacity(report.per_label.len());
    for p in &report.per_label {
        let f = *frequencies
            .get(&p.label)
            .ok_or_else(|| Error::Lookup(format!("no training frequency for label `{}`", p.label)))?;
        items.push((p.label.clone(), f, p.f1));
    }
    let t = |f: usize| match scale {
        BinScale::Log => (f.max(1) as f64).ln(),
        BinScale::Linear => f as f64,
    };
    let inv = |x: f64| match scale {
        BinScale::Log => x.exp(),
        BinScale::Linear => x,
    };
    let lo = items.iter().map(|i| t(i.1)).fold(f64::INFINITY, f64::min);
    let hi = items.iter().map(|i| t(i.1)).fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / num_bins as f64;
    let mut members: Vec<Vec<(String, f64)>> = vec![Vec::new(); num_bins];
    for (name, f, f1) in items {
        let b = if width > 0.0 {
            (((t(f) - lo) / width).floor() as usize).min(num_bins - 1)
        } else {
            0
        };
        members[b].push((name, f1));
    }
    let bins = members
        .into_iter()
        .enumerate()
        .map(|(i, m)| FreqBin {
            lower: inv(lo + width * i as f64),
            upper: inv(lo + width * (i + 1) as f64),
            mean_f1: (!m.is_empty()).then(|| m.iter().map(|x| x.1).sum::<f64>() / m.len() as f64),
            labels: m.into_iter().map(|x| x.0).collect(),
        })
        .collect();
    Ok(FreqF1Report { scale, bins })
}

impl FreqF1Report {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["bin", "lower", "upper", "label_count", "mean_f1"]).map_err(csv_err)?;
        for (i, b) in self.bins.iter().enumerate() {
            let mean = b.mean_f1.map(|m| format!("{m:.6}")).unwrap_or_default();
            w.write_record([
                i.to_string(),
                format!("{:.4}", b.lower),
                format!("{:.4}", b.upper),
                b.labels.len().to_string(),
                mean,
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::LabelScore;

    #[test]
    fn spearman_known_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    fn report(f1s: &[(&str, f64)]) -> MetricsReport {
        MetricsReport {
            one_error: 0.0,
            hamming_loss: 0.0,
            macro_f1: f1s.iter().map(|x| x.1).sum::<f64>() / f1s.len() as f64,
            micro_f1: 0.0,
            per_label: f1s
                .iter()
                .map(|(n, f)| LabelScore {
                    label: n.to_string(),
                    precision: 0.0,
                    recall: 0.0,
                    f1: *f,
                    support: 1,
                })
                .collect(),
        }
    }

    #[test]
    fn single_bin_mean_is_macro_f1() {
        let r = report(&[("a", 0.2), ("b", 0.6), ("c", 1.0)]);
        let freq: BTreeMap<String, usize> = [("a", 5), ("b", 50), ("c", 500)].map(|(n, c)| (n.to_string(), c)).into();
        let out = frequency_f1_report(&freq, &r, 1, BinScale::Log).unwrap();
        assert!((out.bins[0].mean_f1.unwrap() - r.macro_f1).abs() < 1e-12);
    }

    #[test]
    fn bins_partition_labels() {
        let r = report(&[("a", 0.2), ("b", 0.6), ("c", 1.0), ("d", 0.4)]);
        let freq: BTreeMap<String, usize> =
            [("a", 1), ("b", 10), ("c", 1000), ("d", 100)].map(|(n, c)| (n.to_string(), c)).into();
        let out = frequency_f1_report(&freq, &r, 5, BinScale::Log).unwrap();
        let mut all: Vec<String> = out.bins.iter().flat_map(|b| b.labels.clone()).collect();
        all.sort();
        assert_eq!(all, vec!["a", "b", "c", "d"]);
        assert_eq!(out.bins.len(), 5);
        assert_eq!(out.bins[0].labels, vec!["a"]);
        assert_eq!(out.bins[4].labels, vec!["c"]);
    }
}
