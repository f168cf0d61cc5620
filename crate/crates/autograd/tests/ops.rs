use lwpt_autograd::composite::lstm_cell;
use lwpt_autograd::gradcheck::check_gradients;
use lwpt_autograd::{AdamConfig, AdamState, Graph, ParamSet, Tensor, TensorError, LAYER_NORM_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_identity_and_dot() {
    let mut g = Graph::new();
    let eye = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let m = g.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let p = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(Tensor::matrix(&[&[1.0, 2.0]]).unwrap());
    let b = g.constant(Tensor::matrix(&[&[3.0], &[4.0]]).unwrap());
    let p = g.matmul(a, b).unwrap();
    assert_eq!(g.value(p).shape(), &[1, 1]);
    assert_eq!(g.value(p).item(), 11.0);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(TensorError::ShapeMismatch { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let report = check_gradients(&[a, b], 1e-4, |g, v| {
        let p = g.matmul(v[0], v[1])?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(report.max_relative_error() < 1e-5, "{}", report.max_relative_error());
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let s = g.softmax(x, None).unwrap();
    for v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = g.constant(Tensor::vector(vec![5.0, 5.0]));
    let s = g.softmax(x, Some(&[true, false])).unwrap();
    assert_eq!(g.value(s).data(), &[1.0, 0.0]);

    // 40-digit evaluation of exp(x_i) / Σ exp(x_j).
    let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
    let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = g.softmax(x, None).unwrap();
    for (v, e) in g.value(s).data().iter().zip(expected) {
        assert!((v - e).abs() < 1e-15);
    }
    assert!((g.value(s).sum() - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_rejects_fully_masked_row() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let err = g.softmax(x, Some(&[true, false, false, false])).unwrap_err();
    assert_eq!(err, TensorError::InvalidMask { row: 1 });
}

#[test]
fn sigmoid_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 1e3, -1e3]));
    let y = g.sigmoid(x);
    let v = g.value(y).data();
    assert_eq!(v[0], 0.5);
    assert!((v[1] - 1.0).abs() < 1e-12);
    assert!(v[2].is_finite() && v[2] >= 0.0);

    let report = check_gradients(&[Tensor::vector(vec![-2.0, 0.0, 3.0])], 1e-5, |g, v| {
        let y = g.sigmoid(v[0]);
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(report.max_relative_error() < 1e-6, "{}", report.max_relative_error());
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 4], 3.5));
    let gain = g.constant(Tensor::full(&[4], 1.0));
    let bias = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn layer_norm_output_moments_follow_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 64;
    let mut g = Graph::new();
    let x = g.constant(random(&[5, d], &mut rng));
    let gain = g.constant(Tensor::full(&[d], -2.0));
    let bias = g.constant(Tensor::full(&[d], 0.75));
    let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
    for r in 0..5 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64).sqrt();
        assert!((mean - 0.75).abs() < 1e-9);
        assert!((std - 2.0).abs() < 1e-3, "std {std}");
    }
}

#[test]
fn dropout_modes_and_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[100_000], 1.0));

    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.7, false, &mut rng).unwrap(), x);

    let y = g.dropout(x, 0.2, true, &mut rng).unwrap();
    let vals = g.value(y).data();
    let zeros = vals.iter().filter(|v| **v == 0.0).count() as f64 / vals.len() as f64;
    assert!((zeros - 0.2).abs() < 0.01, "zero fraction {zeros}");
    assert!(vals.iter().all(|v| *v == 0.0 || (*v - 1.25).abs() < 1e-12));

    for bad in [-0.1, 1.0, 1.5] {
        assert!(matches!(
            g.dropout(x, bad, true, &mut rng),
            Err(TensorError::InvalidArgument { op: "dropout", .. })
        ));
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.0, -2.0, 3.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
    let y = g.tanh(x);
    assert_eq!(g.backward(y), Err(TensorError::NotScalar(vec![2])));
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn tensor_used_twice_sums_both_paths() {
    // loss = sum(tanh(x) + 3x): d/dx = 1 - tanh²(x) + 3
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![0.3, -1.2]));
    let a = g.tanh(x);
    let b = g.scale(x, 3.0);
    let s = g.add(a, b).unwrap();
    let loss = g.sum(s);
    g.backward(loss).unwrap();
    for (gv, xv) in g.grad(x).unwrap().data().iter().zip([0.3f64, -1.2]) {
        let expected = 1.0 - xv.tanh().powi(2) + 3.0;
        assert!((gv - expected).abs() < 1e-14);
    }
}

#[test]
fn composite_lstm_step_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (b, d, h) = (2, 3, 4);
    let inputs = vec![
        random(&[b, d], &mut rng),
        random(&[b, h], &mut rng),
        random(&[b, h], &mut rng),
        random(&[d, 4 * h], &mut rng),
        random(&[h, 4 * h], &mut rng),
        random(&[4 * h], &mut rng),
    ];
    let report = check_gradients(&inputs, 1e-4, |g, v| {
        let (hn, cn) = lstm_cell(g, v[0], v[1], v[2], v[3], v[4], v[5])?;
        let both = g.concat(&[hn, cn], 1)?;
        let sq = g.mul(both, both)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.max_relative_error() < 1e-4, "{}", report.max_relative_error());
}

#[test]
fn fused_lstm_agrees_with_composite_cells() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (b, t, d, h) = (2, 3, 3, 2);
    let x = random(&[b, t, d], &mut rng);
    let wx = random(&[d, 4 * h], &mut rng);
    let wh = random(&[h, 4 * h], &mut rng);
    let bias = random(&[4 * h], &mut rng);

    for reverse in [false, true] {
        let mut g = Graph::new();
        let (xv, wxv, whv, bv) = (g.constant(x.clone()), g.constant(wx.clone()), g.constant(wh.clone()), g.constant(bias.clone()));
        let fused = g.lstm(xv, wxv, whv, bv, None, reverse).unwrap();

        let mut hs = g.constant(Tensor::zeros(&[b, h]));
        let mut cs = g.constant(Tensor::zeros(&[b, h]));
        let mut outputs = vec![None; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let xt = g.slice(xv, 1, step, 1).unwrap();
            let xt = g.reshape(xt, &[b, d]).unwrap();
            let (hn, cn) = lstm_cell(&mut g, xt, hs, cs, wxv, whv, bv).unwrap();
            hs = hn;
            cs = cn;
            outputs[step] = Some(hn);
        }
        for (step, out) in outputs.into_iter().enumerate() {
            let want = g.value(out.unwrap()).clone();
            let got = g.slice(fused, 1, step, 1).unwrap();
            for (a, e) in g.value(got).data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-14, "reverse={reverse} step={step}");
            }
        }
    }
}

#[test]
fn masked_lstm_steps_carry_state() {
    // A sequence followed by masked padding gives the same states as the
    // unpadded sequence, in both directions.
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let (d, h) = (2, 3);
    let short = random(&[1, 2, d], &mut rng);
    let mut padded = short.data().to_vec();
    padded.extend(random(&[1, 2, d], &mut rng).into_data());
    let padded = Tensor::new(vec![1, 4, d], padded).unwrap();
    let wx = random(&[d, 4 * h], &mut rng);
    let wh = random(&[h, 4 * h], &mut rng);
    let bias = random(&[4 * h], &mut rng);
    for reverse in [false, true] {
        let mut g = Graph::new();
        let (wxv, whv, bv) = (g.constant(wx.clone()), g.constant(wh.clone()), g.constant(bias.clone()));
        let s = g.constant(short.clone());
        let p = g.constant(padded.clone());
        let a = g.lstm(s, wxv, whv, bv, None, reverse).unwrap();
        let b = g.lstm(p, wxv, whv, bv, Some(&[true, true, false, false]), reverse).unwrap();
        let b2 = g.slice(b, 1, 0, 2).unwrap();
        assert_eq!(g.value(a).data(), g.value(b2).data());
    }
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut params = ParamSet::new();
    let id = params.add("w", Tensor::vector(vec![0.5, -1.0])).unwrap();
    let mut adam = AdamState::new(AdamConfig::default(), &params);
    let mut g = Graph::new();
    let w = g.param(&params, id);
    let z = g.scale(w, 0.0);
    let loss = g.sum(z);
    g.backward(loss).unwrap();
    g.accumulate_param_grads(&mut params);
    adam.step(&mut params).unwrap();
    assert_eq!(params.get(id).value().data(), &[0.5, -1.0]);
    assert_eq!(adam.step_count(), 1);
    assert!(params.get(id).grad().is_none(), "gradients are cleared after a step");
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    // m̂ = g, v̂ = g², so Δθ = −lr · g / (|g| + ε).
    let lr = 1e-3;
    for grad in [2.5, -0.04, 1e-3] {
        let mut params = ParamSet::new();
        let id = params.add("theta", Tensor::vector(vec![1.0])).unwrap();
        let mut adam = AdamState::new(AdamConfig::with_learning_rate(lr), &params);
        let mut g = Graph::new();
        let th = g.param(&params, id);
        let l = g.scale(th, grad);
        let l = g.sum(l);
        g.backward(l).unwrap();
        g.accumulate_param_grads(&mut params);
        adam.step(&mut params).unwrap();
        let delta = params.get(id).value().data()[0] - 1.0;
        let expected = -lr * grad.signum() * grad.abs() / (grad.abs() + 1e-8);
        assert!((delta - expected).abs() < 1e-15, "grad {grad}: {delta} vs {expected}");
        assert!((delta + lr * grad.signum()).abs() < 1e-7);
    }
}

#[test]
fn adam_minimizes_square() {
    let mut params = ParamSet::new();
    let id = params.add("theta", Tensor::vector(vec![1.0])).unwrap();
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(0.05), &params);
    for _ in 0..200 {
        let mut g = Graph::new();
        let th = g.param(&params, id);
        let sq = g.mul(th, th).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        g.accumulate_param_grads(&mut params);
        adam.step(&mut params).unwrap();
    }
    let theta = params.get(id).value().data()[0];
    assert!(theta.abs() < 0.1, "theta = {theta}");
}

#[test]
fn adam_reports_missing_gradient() {
    let mut params = ParamSet::new();
    params.add("w", Tensor::vector(vec![1.0])).unwrap();
    let mut adam = AdamState::new(AdamConfig::default(), &params);
    assert_eq!(adam.step(&mut params), Err(TensorError::MissingGradient("w".into())));
    assert_eq!(adam.step_count(), 0);
}

#[test]
fn frozen_parameters_are_constants() {
    let mut params = ParamSet::new();
    let a = params.add("a", Tensor::vector(vec![2.0])).unwrap();
    let b = params.add("b", Tensor::vector(vec![3.0])).unwrap();
    params.set_trainable(a, false);
    let mut adam = AdamState::new(AdamConfig::default(), &params);
    let mut g = Graph::new();
    let (av, bv) = (g.param(&params, a), g.param(&params, b));
    assert!(!g.requires_grad(av));
    let p = g.mul(av, bv).unwrap();
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    g.accumulate_param_grads(&mut params);
    assert!(params.get(a).grad().is_none());
    assert_eq!(params.get(b).grad().unwrap().data(), &[2.0]);
    adam.step(&mut params).unwrap();
    assert_eq!(params.get(a).value().data(), &[2.0]);
    assert!(params.get(b).value().data()[0] < 3.0);
}

#[test]
fn shared_parameter_binds_once() {
    let mut params = ParamSet::new();
    let id = params.add("w", Tensor::vector(vec![1.5])).unwrap();
    let mut g = Graph::new();
    let w1 = g.param(&params, id);
    let w2 = g.param(&params, id);
    assert_eq!(w1, w2);
    let p = g.mul(w1, w2).unwrap();
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    g.accumulate_param_grads(&mut params);
    assert_eq!(params.get(id).grad().unwrap().data(), &[3.0]);
}

#[test]
fn training_is_bitwise_deterministic() {
    fn run(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let w = params.add("w", random(&[3, 2], &mut rng)).unwrap();
        let mut adam = AdamState::new(AdamConfig::with_learning_rate(0.01), &params);
        let x = random(&[4, 3], &mut rng);
        for _ in 0..20 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.param(&params, w);
            let y = g.matmul(xv, wv).unwrap();
            let y = g.dropout(y, 0.2, true, &mut rng).unwrap();
            let y = g.tanh(y);
            let loss = g.mean(y);
            g.backward(loss).unwrap();
            g.accumulate_param_grads(&mut params);
            adam.step(&mut params).unwrap();
        }
        params.get(w).value().data().to_vec()
    }
    let a = run(9);
    let b = run(9);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_ne!(a, run(10));
}

#[test]
fn op_counter_tracks_kinds() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.0]));
    let y = g.tanh(x);
    let _ = g.tanh(y);
    assert_eq!(g.op_count("tanh"), 2);
    assert_eq!(g.op_counts()["leaf"], 1);
}
