mod common;

use common::*;
use lwpt::corpus::{EncodedDoc, Layout};
use lwpt::encoders::{EncoderKind, Mode};
use lwpt::Error;
use lwpt_autograd::{Graph, Tensor};
use proptest::prelude::*;

const KINDS: [EncoderKind; 4] = EncoderKind::ALL;
const VOCAB: usize = 12;

fn repr(enc_out: &Tensor, b: usize, k: usize) -> &[f64] {
    let (l, r) = (enc_out.shape()[1], enc_out.shape()[2]);
    &enc_out.data()[(b * l + k) * r..(b * l + k + 1) * r]
}

#[test]
fn output_shapes() {
    for kind in KINDS {
        let (enc, params) = encoder(kind, VOCAB, 5, 4, 1);
        let docs: Vec<EncodedDoc> = (0..3).map(|i| random_doc(i, VOCAB, 2, 4, 4, &mut rng(i as u64))).collect();
        let refs: Vec<&EncodedDoc> = docs.iter().collect();
        let b = batch(&refs, layout_for(kind, 3, 4), 4);
        let mut g = Graph::new();
        let one = enc.encode_label(&mut g, &params, &b, 2, Mode::Eval).unwrap();
        let all = enc.encode_all(&mut g, &params, &b, Mode::Eval).unwrap();
        assert_eq!(g.shape(one), &[3, 10], "{kind}");
        assert_eq!(g.shape(all), &[3, 4, 10], "{kind}");
    }
}

#[test]
fn single_token_output_is_its_state() {
    let (enc, params) = encoder(EncoderKind::LwLstm, VOCAB, 4, 3, 2);
    let d = doc("x", &[&[5]], &[0]);
    let b = batch(&[&d], Layout::flat(8), 3);
    let mut g = Graph::new();
    let h = enc.word_states(&mut g, &params, &b, &mut Mode::Eval).unwrap();
    let q = enc.encode_all(&mut g, &params, &b, Mode::Eval).unwrap();
    let h = g.value(h).data().to_vec();
    for k in 0..3 {
        assert_eq!(repr(g.value(q), 0, k), &h[..], "label {k}");
    }
}

#[test]
fn zero_context_gives_masked_mean() {
    let (enc, mut params) = encoder(EncoderKind::LwLstm, VOCAB, 4, 3, 3);
    let ctx = params.find("enc.word.context").unwrap();
    params.set_value(ctx, Tensor::zeros(&[3, 8])).unwrap();
    let short = doc("s", &[&[2, 3]], &[0]);
    let long = doc("l", &[&[4, 5, 6, 7]], &[1]);
    let b = batch(&[&short, &long], Layout::flat(8), 3);
    let mut g = Graph::new();
    let h = enc.word_states(&mut g, &params, &b, &mut Mode::Eval).unwrap();
    let q = enc.encode_all(&mut g, &params, &b, Mode::Eval).unwrap();
    let (t, r) = (b.words, 8);
    let h = g.value(h).data();
    for (row, len) in [(0usize, 2usize), (1, 4)] {
        let mean: Vec<f64> = (0..r)
            .map(|j| (0..len).map(|i| h[(row * t + i) * r + j]).sum::<f64>() / len as f64)
            .collect();
        for k in 0..3 {
            assert!(max_abs_diff(repr(g.value(q), row, k), &mean) < 1e-12);
        }
    }
}

#[test]
fn distinct_contexts_give_distinct_representations() {
    for kind in [EncoderKind::LwLstm, EncoderKind::HlwLstm] {
        for seed in 0..5 {
            let (enc, params) = encoder(kind, VOCAB, 4, 3, seed);
            let d = random_doc(0, VOCAB, 2, 4, 3, &mut rng(seed + 50));
            let d = EncodedDoc {
                sentences: d.sentences.iter().map(|s| [s.as_slice(), &[2, 3]].concat()).collect(),
                ..d
            };
            let q = encode_all_values(&enc, &params, &batch(&[&d], layout_for(kind, 4, 8), 3));
            for (j, k) in [(0, 1), (0, 2), (1, 2)] {
                assert!(max_abs_diff(repr(&q, 0, j), repr(&q, 0, k)) > 1e-9, "{kind} seed {seed}");
            }
        }
    }
}

#[test]
fn identical_contexts_give_identical_rows() {
    let (enc, mut params) = encoder(EncoderKind::LwLstm, VOCAB, 4, 2, 4);
    let ctx = params.find("enc.word.context").unwrap();
    let row: Vec<f64> = params.get(ctx).value().data()[..8].to_vec();
    params.set_value(ctx, Tensor::new(vec![2, 8], [row.clone(), row].concat()).unwrap()).unwrap();
    let d = random_doc(0, VOCAB, 1, 6, 2, &mut rng(9));
    let q = encode_all_values(&enc, &params, &batch(&[&d], Layout::flat(8), 2));
    assert_eq!(repr(&q, 0, 0), repr(&q, 0, 1));
}

#[test]
fn encode_all_rows_match_single_label_calls() {
    for kind in KINDS {
        let (enc, params) = encoder(kind, VOCAB, 4, 3, 5);
        let docs: Vec<EncodedDoc> = (0..3).map(|i| random_doc(i, VOCAB, 3, 4, 3, &mut rng(70 + i as u64))).collect();
        let refs: Vec<&EncodedDoc> = docs.iter().collect();
        let b = batch(&refs, layout_for(kind, 3, 4), 3);
        let all = encode_all_values(&enc, &params, &b);
        for k in 0..3 {
            let mut g = Graph::new();
            let q = enc.encode_label(&mut g, &params, &b, k, Mode::Eval).unwrap();
            for row in 0..3 {
                let single = &g.value(q).data()[row * 8..(row + 1) * 8];
                assert!(max_abs_diff(repr(&all, row, k), single) < 1e-12, "{kind} label {k}");
            }
        }
    }
}

#[test]
fn word_states_computed_once_for_all_labels() {
    let l = 5;
    let (enc, params) = encoder(EncoderKind::LwLstm, VOCAB, 4, l, 6);
    let d = random_doc(0, VOCAB, 1, 6, l, &mut rng(1));
    let b = batch(&[&d], Layout::flat(8), l);
    let mut shared = Graph::new();
    enc.encode_all(&mut shared, &params, &b, Mode::Eval).unwrap();
    let mut separate = Graph::new();
    for k in 0..l {
        enc.encode_label(&mut separate, &params, &b, k, Mode::Eval).unwrap();
    }
    // Two layers, two directions.
    assert_eq!(shared.op_count("lstm"), 4);
    assert_eq!(separate.op_count("lstm"), 4 * l);
    assert!(shared.len() * 2 < separate.len());
}

#[test]
fn baselines_ignore_the_label() {
    for kind in [EncoderKind::LstmAttn, EncoderKind::Han] {
        let (enc, params) = encoder(kind, VOCAB, 4, 3, 7);
        let d = random_doc(0, VOCAB, 2, 4, 3, &mut rng(3));
        let b = batch(&[&d], layout_for(kind, 3, 5), 3);
        let q = encode_all_values(&enc, &params, &b);
        assert_eq!(repr(&q, 0, 0), repr(&q, 0, 2));
    }
}

#[test]
fn baselines_have_one_context_per_level() {
    let (l, d) = (6, 5);
    for (lw, base, levels) in [(EncoderKind::LwLstm, EncoderKind::LstmAttn, 1), (EncoderKind::HlwLstm, EncoderKind::Han, 2)] {
        let (a, pa) = encoder(lw, VOCAB, d, l, 1);
        let (b, pb) = encoder(base, VOCAB, d, l, 1);
        assert_eq!(a.num_scalars(&pa) - b.num_scalars(&pb), levels * (l - 1) * 2 * d);
    }
}

#[test]
fn identical_documents_give_identical_rows_and_permutation_commutes() {
    for kind in KINDS {
        let (enc, params) = encoder(kind, VOCAB, 4, 3, 8);
        let docs: Vec<EncodedDoc> = (0..3).map(|i| random_doc(i, VOCAB, 2, 5, 3, &mut rng(90 + i as u64))).collect();
        let layout = layout_for(kind, 3, 6);
        let fwd = encode_all_values(&enc, &params, &batch(&[&docs[0], &docs[1], &docs[2], &docs[0]], layout, 3));
        let rev = encode_all_values(&enc, &params, &batch(&[&docs[2], &docs[1], &docs[0]], layout, 3));
        for k in 0..3 {
            assert!(max_abs_diff(repr(&fwd, 0, k), repr(&fwd, 3, k)) < 1e-12, "{kind}");
            assert!(max_abs_diff(repr(&fwd, 0, k), repr(&rev, 2, k)) < 1e-12, "{kind}");
            assert!(max_abs_diff(repr(&fwd, 2, k), repr(&rev, 0, k)) < 1e-12, "{kind}");
        }
    }
}

#[test]
fn hierarchical_single_word_is_label_independent() {
    let (enc, params) = encoder(EncoderKind::HlwLstm, VOCAB, 4, 3, 9);
    let d = doc("x", &[&[4]], &[0]);
    let q = encode_all_values(&enc, &params, &batch(&[&d], Layout::hierarchical(1, 1), 3));
    assert_eq!(repr(&q, 0, 0), repr(&q, 0, 1));
    assert_eq!(repr(&q, 0, 0), repr(&q, 0, 2));
}

#[test]
fn padded_sentence_slot_changes_nothing() {
    let (enc, params) = encoder(EncoderKind::HlwLstm, VOCAB, 4, 3, 10);
    let one = doc("one", &[&[2, 5, 7]], &[0]);
    let two = doc("two", &[&[3, 4], &[6, 8, 9]], &[1]);
    let alone = encode_all_values(&enc, &params, &batch(&[&one], Layout::hierarchical(1, 3), 3));
    let padded = encode_all_values(&enc, &params, &batch(&[&one, &two], Layout::hierarchical(2, 3), 3));
    assert!(max_abs_diff(alone.data(), &padded.data()[..alone.numel()]) < 1e-12);
}

#[test]
fn wrong_batch_mode_and_label_rejected() {
    let (enc, params) = encoder(EncoderKind::HlwLstm, VOCAB, 4, 3, 11);
    let d = doc("x", &[&[4, 5]], &[0]);
    let mut g = Graph::new();
    let flat = batch(&[&d], Layout::flat(4), 3);
    assert!(matches!(enc.encode_all(&mut g, &params, &flat, Mode::Eval), Err(Error::Mode(_))));
    let hier = batch(&[&d], Layout::hierarchical(2, 4), 3);
    assert!(enc.encode_label(&mut g, &params, &hier, 3, Mode::Eval).is_err());
}

#[test]
fn reversed_sequence_mirrors_directions() {
    let mut r = rng(12);
    let rand_t = |shape: &[usize], r: &mut rand_chacha::ChaCha8Rng| {
        use rand::Rng;
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let x = rand_t(&[1, 4, 3], &mut r);
    let (wx, wh, bias) = (rand_t(&[3, 8], &mut r), rand_t(&[2, 8], &mut r), rand_t(&[8], &mut r));
    let mut rev = x.clone();
    for i in 0..4 {
        rev.data_mut()[i * 3..(i + 1) * 3].copy_from_slice(&x.data()[(3 - i) * 3..(4 - i) * 3]);
    }
    let mut g = Graph::new();
    let (xv, rv) = (g.constant(x), g.constant(rev));
    let (a, b, c) = (g.constant(wx), g.constant(wh), g.constant(bias));
    let backward = g.lstm(xv, a, b, c, None, true).unwrap();
    let forward_on_reversed = g.lstm(rv, a, b, c, None, false).unwrap();
    let (p, q) = (g.value(backward).data(), g.value(forward_on_reversed).data());
    for i in 0..4 {
        assert!(max_abs_diff(&p[i * 2..(i + 1) * 2], &q[(3 - i) * 2..(4 - i) * 2]) < 1e-15);
    }
}

#[test]
fn full_encoder_gradients_match_finite_differences() {
    for kind in KINDS {
        for seed in 1..=5 {
            let err = encoder_gradcheck(kind, seed);
            assert!(err < 1e-4, "{kind} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn dropout_only_in_training() {
    let (enc, params) = encoder(EncoderKind::LwLstm, VOCAB, 4, 3, 13);
    let d = random_doc(0, VOCAB, 1, 6, 3, &mut rng(4));
    let b = batch(&[&d], Layout::flat(8), 3);
    let eval = encode_all_values(&enc, &params, &b);
    assert_eq!(eval, encode_all_values(&enc, &params, &b));
    let mut g = Graph::new();
    let mut r = rng(5);
    let q = enc.encode_all(&mut g, &params, &b, Mode::Train(&mut r)).unwrap();
    assert!(max_abs_diff(g.value(q).data(), eval.data()) > 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn appending_padding_never_changes_outputs(seed in 0u64..1000, extra in 1usize..4, hier in any::<bool>()) {
        let kind = if hier { EncoderKind::HlwLstm } else { EncoderKind::LwLstm };
        let (enc, params) = encoder(kind, VOCAB, 3, 3, seed);
        let mut r = rng(seed);
        let short = random_doc(0, VOCAB, 1, 3, 3, &mut r);
        let long = random_doc(1, VOCAB, 1 + extra, 3 + extra, 3, &mut r);
        let layout = layout_for(kind, 8, 8);
        let alone = encode_all_values(&enc, &params, &batch(&[&short], layout, 3));
        let padded = encode_all_values(&enc, &params, &batch(&[&short, &long], layout, 3));
        prop_assert!(max_abs_diff(alone.data(), &padded.data()[..alone.numel()]) < 1e-12);
    }
}
