//! Finite-difference check of every tensor operation and of whole encoders.
//!
//!     cargo run --release --example gradcheck

use lwpt::corpus::{Batch, EncodedDoc, Layout};
use lwpt::encoders::{Encoder, EncoderConfig, EncoderKind, Mode};
use lwpt_autograd::gradcheck::op_cases;
use lwpt_autograd::{Graph, ParamSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lwpt::Result<()> {
    println!("{:<28} {:>12}", "operation", "worst error");
    for case in op_cases() {
        let worst = (1..=5).map(|s| case.check(s, 1e-5)).collect::<Result<Vec<_>, _>>()?;
        println!("{:<28} {:>12.2e}", case.name, worst.iter().copied().fold(0.0, f64::max));
    }

    // Whole-encoder check: perturb every parameter of a tiny LW-LSTM.
    let cfg = EncoderConfig::new(EncoderKind::LwLstm, 9, 4, 3);
    let mut params = ParamSet::new();
    let enc = Encoder::new(cfg, "enc", &mut params, &mut ChaCha8Rng::seed_from_u64(0))?;
    let docs = [
        EncodedDoc { id: "a".into(), sentences: vec![vec![2, 3, 4]], labels: vec![0] },
        EncodedDoc { id: "b".into(), sentences: vec![vec![5, 6]], labels: vec![1, 2] },
    ];
    let batch = Batch::from_docs(&docs.iter().collect::<Vec<_>>(), Layout::flat(3), 3)?;
    let loss = |params: &ParamSet| -> lwpt::Result<(Graph, lwpt_autograd::Var)> {
        let mut g = Graph::new();
        let q = enc.encode_all(&mut g, params, &batch, Mode::Eval)?;
        let t = g.tanh(q);
        let s = g.sum(t);
        Ok((g, s))
    };
    let (mut g, out) = loss(&params)?;
    g.backward(out)?;
    g.accumulate_param_grads(&mut params);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let orig = params.get(id).value().clone();
        let grad = params.get(id).grad().cloned().expect("every parameter is reached");
        for j in 0..orig.numel() {
            let mut v = orig.clone();
            v.data_mut()[j] += h;
            params.set_value(id, v.clone())?;
            let (g, o) = loss(&params)?;
            let plus = g.value(o).item();
            v.data_mut()[j] -= 2.0 * h;
            params.set_value(id, v)?;
            let (g, o) = loss(&params)?;
            let numeric = (plus - g.value(o).item()) / (2.0 * h);
            let scale = grad.max_abs().max(1e-12);
            worst = worst.max((numeric - grad.data()[j]).abs() / scale);
        }
        params.set_value(id, orig)?;
    }
    println!("{:<28} {:>12.2e}", "LW-LSTM encoder (d=4, l=3)", worst);
    Ok(())
}
