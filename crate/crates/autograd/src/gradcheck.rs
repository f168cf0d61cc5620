//! Central finite-difference gradient checks.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Comparison of analytic and numeric gradients for one input.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)`; zero when both vanish.
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.relative_error).fold(0.0, f64::max)
    }
}

fn relative_linf(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.data().iter().zip(b.data()).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.max_abs().max(b.max_abs());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks `d f / d inputs` against central differences with step `h`.
///
/// `f` builds a scalar loss from the inputs, which it receives as
/// gradient-requiring leaves. It must be deterministic.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        let relative_error = relative_linf(&analytic, &numeric);
        reports.push(InputReport {
            analytic,
            numeric,
            relative_error,
        });
    }
    Ok(GradCheckReport { inputs: reports })
}

type Builder = fn(&mut Graph, &[Var], u64) -> Result<Var>;

/// One operation (or small group of operations) under test: random inputs of
/// the given shapes, drawn from `(0.2, 1.5)` when `positive` and from
/// `(-1, 1)` otherwise.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub positive: bool,
    build: Builder,
}

fn random(shape: &[usize], positive: bool, rng: &mut StdRng) -> Tensor {
    let n = shape.iter().product();
    let range = if positive { 0.2..1.5 } else { -1.0..1.0 };
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(range.clone())).collect()).expect("shape matches")
}

/// Contracts the output with fixed random weights so every entry of the
/// gradient is exercised distinctly.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = StdRng::seed_from_u64(seed ^ 0xABCD);
    let w = random(g.shape(y), false, &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

impl OpCase {
    fn new(name: &'static str, shapes: &[&[usize]], positive: bool, build: Builder) -> Self {
        OpCase {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            positive,
            build,
        }
    }

    /// Worst relative error over all inputs for one seed.
    pub fn check(&self, seed: u64, h: f64) -> Result<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = self.shapes.iter().map(|s| random(s, self.positive, &mut rng)).collect();
        let report = check_gradients(&inputs, h, |g, v| (self.build)(g, v, seed))?;
        Ok(report.max_relative_error())
    }
}

/// Every differentiable operation of [`Graph`], each feeding a random
/// projection (or its own scalar loss).
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase::new("matmul", &[&[3, 4], &[4, 2]], false, |g, v, s| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, s)
        }),
        OpCase::new("bmm", &[&[2, 3, 4], &[2, 4, 2]], false, |g, v, s| {
            let y = g.bmm(v[0], v[1])?;
            project(g, y, s)
        }),
        OpCase::new("permute/transpose/reshape", &[&[2, 3, 4]], false, |g, v, s| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            let y = g.transpose(y)?;
            let y = g.reshape(y, &[4, 6])?;
            project(g, y, s)
        }),
        OpCase::new("add/sub/mul", &[&[3, 4], &[3, 4]], false, |g, v, s| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(v[0], v[1])?;
            let y = g.mul(a, b)?;
            project(g, y, s)
        }),
        OpCase::new("add/mul broadcast", &[&[2, 3, 4], &[4], &[3, 4]], false, |g, v, s| {
            let a = g.add_broadcast(v[0], v[1])?;
            let y = g.mul_broadcast(a, v[2])?;
            project(g, y, s)
        }),
        OpCase::new("sigmoid/tanh/exp/scale", &[&[3, 3]], false, |g, v, s| {
            let a = g.sigmoid(v[0]);
            let b = g.tanh(v[0]);
            let c = g.exp(v[0]);
            let c = g.scale(c, 0.5);
            let y = g.add(a, b)?;
            let y = g.add(y, c)?;
            project(g, y, s)
        }),
        OpCase::new("log", &[&[3, 3]], true, |g, v, s| {
            let y = g.log(v[0]);
            project(g, y, s)
        }),
        OpCase::new("sum/mean", &[&[3, 5]], false, |g, v, _| {
            let sq = g.mul(v[0], v[0])?;
            let a = g.sum(sq);
            let b = g.mean(v[0]);
            let b = g.scale(b, 7.0);
            g.add(a, b)
        }),
        OpCase::new("concat/slice", &[&[2, 3, 2], &[2, 1, 2]], false, |g, v, s| {
            let c = g.concat(&[v[0], v[1], v[0]], 1)?;
            let y = g.slice(c, 1, 2, 4)?;
            project(g, y, s)
        }),
        OpCase::new("gather", &[&[5, 3]], false, |g, v, s| {
            let y = g.gather(v[0], &[4, 0, 4, 2])?;
            project(g, y, s)
        }),
        OpCase::new("masked softmax", &[&[3, 4]], false, |g, v, s| {
            let mask = [true, true, false, true, false, true, true, true, true, false, false, false];
            let y = g.softmax(v[0], Some(&mask))?;
            project(g, y, s)
        }),
        OpCase::new("layer_norm", &[&[3, 5], &[5], &[5]], false, |g, v, s| {
            let y = g.layer_norm(v[0], v[1], v[2], crate::LAYER_NORM_EPS)?;
            project(g, y, s)
        }),
        OpCase::new("dropout", &[&[4, 4]], false, |g, v, s| {
            let mut rng = StdRng::seed_from_u64(s);
            let y = g.dropout(v[0], 0.3, true, &mut rng)?;
            project(g, y, s)
        }),
        OpCase::new("masked bidirectional lstm", &[&[2, 3, 3], &[3, 8], &[2, 8], &[8]], false, |g, v, s| {
            let mask = [true, true, true, true, true, false];
            let f = g.lstm(v[0], v[1], v[2], v[3], Some(&mask), false)?;
            let b = g.lstm(v[0], v[1], v[2], v[3], Some(&mask), true)?;
            let y = g.concat(&[f, b], 2)?;
            project(g, y, s)
        }),
        OpCase::new("cross_entropy", &[&[3, 4]], false, |g, v, _| g.cross_entropy(v[0], &[1, 3, 0])),
        OpCase::new("bce", &[&[3, 4]], false, |g, v, _| {
            let p = g.sigmoid(v[0]);
            let y = Tensor::new(vec![3, 4], vec![1., 0., 0., 1., 0., 0., 1., 1., 1., 0., 1., 0.])?;
            g.bce(p, &y)
        }),
    ]
}
