//! Finite-difference checks for every differentiable operation.

use lwpt_autograd::gradcheck::{check_gradients, op_cases};
use lwpt_autograd::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const TOLERANCE: f64 = 1e-4;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn every_op_matches_finite_differences() {
    let cases = op_cases();
    assert!(cases.len() >= 16);
    for case in &cases {
        for seed in SEEDS {
            let err = case.check(seed, STEP).unwrap();
            assert!(err < TOLERANCE, "{} seed {seed}: relative error {err:e}", case.name);
        }
    }
}

#[test]
fn check_detects_a_wrong_gradient() {
    // Detaching one factor of x³ makes backprop report 2x² instead of 3x².
    let x = Tensor::vector(vec![0.3, -0.4]);
    let report = check_gradients(&[x], STEP, |g, v| {
        let y = g.mul(v[0], v[0])?;
        let detached = g.constant(g.value(v[0]).clone());
        let z = g.mul(y, detached)?;
        Ok(g.sum(z))
    })
    .unwrap();
    assert!(report.max_relative_error() > 0.1);
}

#[test]
fn bce_gradient_wrt_logits_is_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let logits = random(&[4, 3], &mut rng);
    let y = Tensor::new(vec![4, 3], vec![1., 0., 0., 0., 1., 1., 1., 1., 0., 0., 0., 1.]).unwrap();
    let mut g = Graph::new();
    let z = g.variable(logits);
    let p = g.sigmoid(z);
    let loss = g.bce(p, &y).unwrap();
    g.backward(loss).unwrap();
    let probs = g.value(p).clone();
    for ((gz, pv), yv) in g.grad(z).unwrap().data().iter().zip(probs.data()).zip(y.data()) {
        assert!((gz - (pv - yv) / 4.0).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        values in prop::collection::vec(-30.0f64..30.0, 12),
        mask in prop::collection::vec(any::<bool>(), 12),
    ) {
        let mut mask = mask;
        for r in 0..3 {
            mask[r * 4] |= !mask[r * 4..(r + 1) * 4].iter().any(|m| *m);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], values).unwrap());
        let y = g.softmax(x, Some(&mask)).unwrap();
        for r in 0..3 {
            let row = g.value(y).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for j in 0..4 {
                prop_assert!(row[j] >= 0.0);
                if !mask[r * 4 + j] {
                    prop_assert_eq!(row[j], 0.0);
                }
            }
        }
    }
}
