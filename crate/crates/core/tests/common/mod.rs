#![allow(dead_code)]

pub mod oracle;

use lwpt::corpus::{Batch, EncodedDoc, Layout};
use lwpt::encoders::{Encoder, EncoderConfig, EncoderKind, Mode};
use lwpt_autograd::{Graph, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn doc(id: &str, sentences: &[&[usize]], labels: &[usize]) -> EncodedDoc {
    EncodedDoc {
        id: id.to_string(),
        sentences: sentences.iter().map(|s| s.to_vec()).collect(),
        labels: labels.to_vec(),
    }
}

/// Random document with `sentences` sentences of 1..=max_len tokens drawn
/// from ids `2..vocab` (PAD and UNK excluded).
pub fn random_doc(id: usize, vocab: usize, sentences: usize, max_len: usize, l: usize, rng: &mut impl Rng) -> EncodedDoc {
    let sents = (0..sentences)
        .map(|_| {
            let n = rng.gen_range(1..=max_len);
            (0..n).map(|_| rng.gen_range(2..vocab)).collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..l).filter(|_| rng.gen_bool(0.5)).collect();
    if labels.is_empty() {
        labels.push(rng.gen_range(0..l));
    }
    EncodedDoc {
        id: format!("d{id}"),
        sentences: sents,
        labels,
    }
}

pub fn layout_for(kind: EncoderKind, m: usize, t: usize) -> Layout {
    if kind.is_hierarchical() {
        Layout::hierarchical(m, t)
    } else {
        Layout::flat(t)
    }
}

pub fn batch(docs: &[&EncodedDoc], layout: Layout, l: usize) -> Batch {
    Batch::from_docs(docs, layout, l).unwrap()
}

pub fn encoder(kind: EncoderKind, vocab: usize, dim: usize, l: usize, seed: u64) -> (Encoder, ParamSet) {
    let cfg = EncoderConfig::new(kind, vocab, dim, l);
    let mut params = ParamSet::new();
    let enc = Encoder::new(cfg, "enc", &mut params, &mut rng(seed)).unwrap();
    (enc, params)
}

/// Eval-mode `[B, l, 2H]` values.
pub fn encode_all_values(enc: &Encoder, params: &ParamSet, b: &Batch) -> Tensor {
    let mut g = Graph::new();
    let q = enc.encode_all(&mut g, params, b, Mode::Eval).unwrap();
    g.value(q).clone()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Scalar loss `Σ w ⊙ y` with fixed random weights `w`, so every output
/// entry contributes a distinct gradient.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut r = rng(seed ^ 0x5EED);
    let n: usize = g.shape(y).iter().product();
    let w = Tensor::new(g.shape(y).to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

/// Largest per-parameter relative error (‖analytic − numeric‖∞ over the
/// larger ∞-norm) between backprop gradients and central differences.
pub fn param_gradcheck(params: &mut ParamSet, loss: impl Fn(&mut Graph, &ParamSet) -> Var) -> f64 {
    gradcheck_on(params, |p| p, loss)
}

/// [`param_gradcheck`] over any state that owns its parameters, such as a
/// whole model.
pub fn gradcheck_on<S>(state: &mut S, params: fn(&mut S) -> &mut ParamSet, loss: impl Fn(&mut Graph, &S) -> Var) -> f64 {
    const H: f64 = 1e-5;
    params(state).zero_grad();
    let mut g = Graph::new();
    let out = loss(&mut g, state);
    g.backward(out).unwrap();
    g.accumulate_param_grads(params(state));
    let eval = |s: &S| {
        let mut g = Graph::new();
        let out = loss(&mut g, s);
        g.value(out).item()
    };
    let ids: Vec<_> = params(state).iter().map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let orig = params(state).get(id).value().clone();
        let analytic = params(state).get(id).grad().cloned().unwrap_or_else(|| Tensor::zeros(orig.shape()));
        let mut numeric = vec![0.0; orig.numel()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let mut v = orig.clone();
            v.data_mut()[j] = orig.data()[j] + H;
            params(state).set_value(id, v.clone()).unwrap();
            let plus = eval(state);
            v.data_mut()[j] = orig.data()[j] - H;
            params(state).set_value(id, v).unwrap();
            let minus = eval(state);
            *num = (plus - minus) / (2.0 * H);
        }
        params(state).set_value(id, orig).unwrap();
        let diff = max_abs_diff(analytic.data(), &numeric);
        let scale = analytic.data().iter().chain(&numeric).map(|x| x.abs()).fold(0.0, f64::max);
        if scale > 1e-300 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

/// Gradient check of a whole encoder at d=4, t=3, m=2, l=3 on two random
/// documents, returning the worst relative error.
pub fn encoder_gradcheck(kind: EncoderKind, seed: u64) -> f64 {
    let (vocab, l) = (9, 3);
    let (enc, mut params) = encoder(kind, vocab, 4, l, seed);
    let mut r = rng(seed + 1000);
    let docs: Vec<EncodedDoc> = (0..2).map(|i| random_doc(i, vocab, 2, 3, l, &mut r)).collect();
    let refs: Vec<&EncodedDoc> = docs.iter().collect();
    let b = batch(&refs, layout_for(kind, 2, 3), l);
    param_gradcheck(&mut params, |g, p| {
        let q = enc.encode_all(g, p, &b, Mode::Eval).unwrap();
        project(g, q, seed)
    })
}
