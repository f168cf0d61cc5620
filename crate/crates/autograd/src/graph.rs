//! The recording tape and its differentiable operations.
//!
//! Every operation appends one node holding its output value and enough
//! information to run its backward rule. Nodes are only ever appended, so the
//! recording order is a valid reverse-topological order for [`Graph::backward`].

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::optim::{ParamId, ParamSet};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, permute_data, same_shape, sigmoid, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Arc<Tensor>,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

struct LstmCache {
    x: Var,
    wx: Var,
    wh: Var,
    bias: Var,
    batch: usize,
    steps: usize,
    hidden: usize,
    reverse: bool,
    mask: Option<Vec<bool>>,
    // Per processing step, each [batch, hidden] (gates [batch, 4*hidden]).
    gates: Vec<Vec<f64>>,
    c_prev: Vec<Vec<f64>>,
    tanh_c: Vec<Vec<f64>>,
    h_prev: Vec<Vec<f64>>,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LayerNorm { input: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { input: Var, keep: Vec<f64> },
    Lstm(Box<LstmCache>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Bce { probs: Var, targets: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::MulBroadcast(..) => "mul_broadcast",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Lstm(..) => "lstm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Bce { .. } => "bce",
        }
    }
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(u64, usize), Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, populated by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of recorded nodes per operation kind.
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for n in &self.nodes {
            *counts.entry(n.op.name()).or_insert(0) += 1;
        }
        counts
    }

    pub fn op_count(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.push_arc(Arc::new(value), requires_grad, op)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Binds a parameter onto the tape. Binding the same parameter twice
    /// returns the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        let key = (set.uid(), id.index());
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let p = set.get(id);
        let v = self.push_arc(p.value_arc(), p.trainable(), Op::Param);
        self.bound.insert(key, v);
        v
    }

    /// Adds the gradients of every trainable parameter of `set` bound on this
    /// graph into the set. Bound parameters the loss never reached get zeros.
    pub fn accumulate_param_grads(&self, set: &mut ParamSet) {
        let uid = set.uid();
        let mut bound: Vec<(usize, Var)> = self
            .bound
            .iter()
            .filter(|((u, _), _)| *u == uid)
            .map(|((_, i), v)| (*i, *v))
            .collect();
        bound.sort();
        for (idx, v) in bound {
            let node = &self.nodes[v.0];
            if !node.requires_grad {
                continue;
            }
            let grad = node
                .grad
                .clone()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            set.add_grad(ParamId::from_index(idx), &grad);
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m,k] × [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// Batched product `[b,m,k] × [b,k,n] → [b,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 3 || bv.ndim() != 3 || av.shape()[0] != bv.shape()[0] || av.shape()[2] != bv.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm_nn(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![bs, m, n], out)?, rg, Op::BatchMatMul(a, b)))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let mut seen = vec![false; av.ndim()];
        if axes.len() != av.ndim() || axes.iter().any(|&x| x >= seen.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                msg: format!("{axes:?} is not a permutation of the axes of {:?}", av.shape()),
            });
        }
        let (shape, data) = permute_data(av.data(), av.shape(), axes);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Permute(a, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.value(a).ndim();
        if nd < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("needs at least 2 axes, got {nd}"),
            });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Reshape(a)))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias add).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add_broadcast", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = bv.numel();
        let data = av.data().iter().enumerate().map(|(i, x)| x + bv.data()[i % n]).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::AddBroadcast(a, b)))
    }

    /// `a * b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul_broadcast", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = bv.numel();
        let data = av.data().iter().enumerate().map(|(i, x)| x * bv.data()[i % n]).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::MulBroadcast(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, rg, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(t, rg, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(t, rg, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(t, rg, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(t, rg, Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / v.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    // ---- shape assembly ------------------------------------------------

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, rg, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// `a[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Slice { input: a, axis, start }))
    }

    /// Row gather along the first axis: `table[ids[i], ..]`. This is the
    /// embedding lookup; its backward scatter-adds into the table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: "cannot gather from a scalar".into(),
            });
        }
        let rows = tv.shape()[0];
        let width = tv.numel() / rows.max(1);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(&tv.data()[id * width..(id + 1) * width]);
        }
        let mut shape = tv.shape().to_vec();
        shape[0] = ids.len();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(table);
        Ok(self.push(t, rg, Op::Gather { table, ids: ids.to_vec() }))
    }

    // ---- neural-network primitives --------------------------------------

    /// Softmax over the last axis. Entries whose `mask` is false get exactly 0;
    /// every row needs at least one unmasked entry.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax",
                    left: xv.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let rows = xv.numel() / n.max(1);
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let keep = |j: usize| mask.is_none_or(|m| m[r * n + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::InvalidMask { row: r });
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for j in 0..n {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Softmax(x)))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout: in training mode each entry is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; otherwise identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                msg: format!("probability {p} outside [0, 1)"),
            });
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let keep: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let data = xv.data().iter().zip(&keep).map(|(a, k)| a * k).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Dropout { input: x, keep }))
    }

    /// Runs a single-direction LSTM over `x: [B,T,D]`, returning every hidden
    /// state `[B,T,H]`. Gate layout in `wx: [D,4H]`, `wh: [H,4H]`, `bias: [4H]`
    /// is input, forget, cell, output.
    ///
    /// Where `mask[b,t]` is false the step is skipped: state is carried over
    /// unchanged and the carried hidden state is emitted. With `reverse` the
    /// sequence is consumed from the last step to the first.
    pub fn lstm(&mut self, x: Var, wx: Var, wh: Var, bias: Var, mask: Option<&[bool]>, reverse: bool) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 3 {
            return Err(TensorError::InvalidArgument {
                op: "lstm",
                msg: format!("input must be [batch, steps, features], got {:?}", xv.shape()),
            });
        }
        let (b, t, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let whv = self.value(wh);
        if whv.ndim() != 2 || whv.shape()[1] != 4 * whv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "lstm",
                left: vec![0, 4],
                right: whv.shape().to_vec(),
            });
        }
        let h = whv.shape()[0];
        let g4 = 4 * h;
        if self.shape(wx) != [d, g4] {
            return Err(TensorError::ShapeMismatch {
                op: "lstm",
                left: xv.shape().to_vec(),
                right: self.shape(wx).to_vec(),
            });
        }
        if self.shape(bias) != [g4] {
            return Err(TensorError::ShapeMismatch {
                op: "lstm",
                left: vec![g4],
                right: self.shape(bias).to_vec(),
            });
        }
        if let Some(m) = mask {
            if m.len() != b * t {
                return Err(TensorError::ShapeMismatch {
                    op: "lstm",
                    left: vec![b, t],
                    right: vec![m.len()],
                });
            }
        }

        let mut xw = vec![0.0; b * t * g4];
        gemm_nn(xv.data(), self.value(wx).data(), &mut xw, b * t, d, g4);
        let bv = self.value(bias).data();
        let whd = whv.data();

        let mut out = vec![0.0; b * t * h];
        let mut hs = vec![0.0; b * h];
        let mut cs = vec![0.0; b * h];
        let mut gates_all = Vec::with_capacity(t);
        let mut c_prev_all = Vec::with_capacity(t);
        let mut tanh_all = Vec::with_capacity(t);
        let mut h_prev_all = Vec::with_capacity(t);

        for s in 0..t {
            let step = if reverse { t - 1 - s } else { s };
            let mut z = vec![0.0; b * g4];
            for bi in 0..b {
                let src = &xw[(bi * t + step) * g4..(bi * t + step + 1) * g4];
                let dst = &mut z[bi * g4..(bi + 1) * g4];
                for ((o, x), bb) in dst.iter_mut().zip(src).zip(bv) {
                    *o = x + bb;
                }
            }
            gemm_nn(&hs, whd, &mut z, b, h, g4);
            let mut tanh_c = vec![0.0; b * h];
            let c_prev = cs.clone();
            let h_prev = hs.clone();
            for bi in 0..b {
                let active = mask.is_none_or(|m| m[bi * t + step]);
                let zr = &mut z[bi * g4..(bi + 1) * g4];
                for j in 0..h {
                    zr[j] = sigmoid(zr[j]);
                    zr[h + j] = sigmoid(zr[h + j]);
                    zr[2 * h + j] = zr[2 * h + j].tanh();
                    zr[3 * h + j] = sigmoid(zr[3 * h + j]);
                }
                if active {
                    for j in 0..h {
                        let c = zr[h + j] * c_prev[bi * h + j] + zr[j] * zr[2 * h + j];
                        let tc = c.tanh();
                        cs[bi * h + j] = c;
                        tanh_c[bi * h + j] = tc;
                        hs[bi * h + j] = zr[3 * h + j] * tc;
                    }
                }
                out[(bi * t + step) * h..(bi * t + step + 1) * h].copy_from_slice(&hs[bi * h..(bi + 1) * h]);
            }
            gates_all.push(z);
            c_prev_all.push(c_prev);
            tanh_all.push(tanh_c);
            h_prev_all.push(h_prev);
        }

        let rg = self.rg(x) || self.rg(wx) || self.rg(wh) || self.rg(bias);
        let cache = LstmCache {
            x,
            wx,
            wh,
            bias,
            batch: b,
            steps: t,
            hidden: h,
            reverse,
            mask: mask.map(|m| m.to_vec()),
            gates: gates_all,
            c_prev: c_prev_all,
            tanh_c: tanh_all,
            h_prev: h_prev_all,
        };
        Ok(self.push(Tensor::new(vec![b, t, h], out)?, rg, Op::Lstm(Box::new(cache))))
    }

    /// Mean over rows of `-log softmax(logits[b])[targets[b]]`, computed with
    /// log-sum-exp stabilization.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.shape()[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let (rows, n) = (lv.shape()[0], lv.shape()[1]);
        let mut probs = vec![0.0; rows * n];
        let mut total = 0.0;
        for r in 0..rows {
            if targets[r] >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: targets[r],
                    size: n,
                });
            }
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[targets[r]];
            for j in 0..n {
                probs[r * n + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(logits);
        let loss = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            loss,
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Binary cross-entropy on probabilities, summed over the last axis and
    /// averaged over rows. Log arguments are clamped at `1e-12`.
    pub fn bce(&mut self, probs: Var, targets: &Tensor) -> Result<Var> {
        let pv = self.value(probs);
        same_shape("bce", pv, targets)?;
        let n = pv.last_dim().max(1);
        let rows = (pv.numel() / n).max(1);
        let mut total = 0.0;
        for (p, y) in pv.data().iter().zip(targets.data()) {
            total -= y * p.max(BCE_CLAMP).ln() + (1.0 - y) * (1.0 - p).max(BCE_CLAMP).ln();
        }
        let rg = self.rg(probs);
        let loss = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            loss,
            rg,
            Op::Bce {
                probs,
                targets: targets.data().to_vec(),
            },
        ))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Accumulates `d loss / d leaf` into every gradient-requiring leaf that the
    /// loss depends on. Calling it again without resetting adds again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match self.nodes[i].op {
                Op::Leaf | Op::Param => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => acc.add_assign(&g),
                        None => node.grad = Some(g),
                    }
                }
                _ => self.backprop_node(i, &g, &mut adj)?,
            }
        }
        Ok(())
    }

    /// Clears all stored leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(gd, bv.data(), &mut da, m, n, k);
                    accumulate(adj, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(av.data(), gd, &mut db, k, m, n);
                    accumulate(adj, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                if self.rg(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for s in 0..bs {
                        gemm_nt(
                            &gd[s * m * n..(s + 1) * m * n],
                            &bv.data()[s * k * n..(s + 1) * k * n],
                            &mut da[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(adj, *a, Tensor::new(vec![bs, m, k], da)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for s in 0..bs {
                        gemm_tn(
                            &av.data()[s * m * k..(s + 1) * m * k],
                            &gd[s * m * n..(s + 1) * m * n],
                            &mut db[s * k * n..(s + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    accumulate(adj, *b, Tensor::new(vec![bs, k, n], db)?);
                }
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (shape, data) = permute_data(gd, out.shape(), &inverse);
                accumulate(adj, *a, Tensor::new(shape, data)?);
            }
            Op::Reshape(a) => {
                accumulate(adj, *a, g.reshape(self.shape(*a))?);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(adj, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if self.rg(*b) {
                    accumulate(adj, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    accumulate(adj, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(adj, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::AddBroadcast(a, b) => {
                if self.rg(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if self.rg(*b) {
                    let bshape = self.shape(*b).to_vec();
                    let n = bshape.iter().product::<usize>();
                    let mut db = vec![0.0; n];
                    for (i, x) in gd.iter().enumerate() {
                        db[i % n] += x;
                    }
                    accumulate(adj, *b, Tensor::new(bshape, db)?);
                }
            }
            Op::MulBroadcast(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = bv.numel();
                if self.rg(*a) {
                    let d = gd.iter().enumerate().map(|(i, x)| x * bv.data()[i % n]).collect();
                    accumulate(adj, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n];
                    for (i, (x, y)) in gd.iter().zip(av.data()).enumerate() {
                        db[i % n] += x * y;
                    }
                    accumulate(adj, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Scale(a, c) => accumulate(adj, *a, g.map(|x| x * c)),
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(out.data()).map(|(x, y)| x * y * (1.0 - y)).collect();
                accumulate(adj, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Tanh(a) => {
                let d = gd.iter().zip(out.data()).map(|(x, y)| x * (1.0 - y * y)).collect();
                accumulate(adj, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(out.data()).map(|(x, y)| x * y).collect();
                accumulate(adj, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Log(a) => {
                let d = gd.iter().zip(self.value(*a).data()).map(|(x, y)| x / y).collect();
                accumulate(adj, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sum(a) => {
                accumulate(adj, *a, Tensor::full(self.shape(*a), g.item()));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                accumulate(adj, *a, Tensor::full(self.shape(*a), g.item() / n));
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let full = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let vs = self.shape(v).to_vec();
                    let chunk = vs[*axis] * inner;
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * full + offset..o * full + offset + chunk]);
                        }
                        accumulate(adj, v, Tensor::new(vs, d)?);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input).to_vec();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let full = in_shape[*axis] * inner;
                let chunk = out.shape()[*axis] * inner;
                let mut d = vec![0.0; in_shape.iter().product()];
                for o in 0..outer {
                    let base = o * full + start * inner;
                    d[base..base + chunk].copy_from_slice(&gd[o * chunk..(o + 1) * chunk]);
                }
                accumulate(adj, *input, Tensor::new(in_shape, d)?);
            }
            Op::Gather { table, ids } => {
                let ts = self.shape(*table).to_vec();
                let width = ts[1..].iter().product::<usize>();
                let mut d = vec![0.0; ts.iter().product()];
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, src) in d[id * width..(id + 1) * width].iter_mut().zip(&gd[r * width..(r + 1) * width]) {
                        *dst += src;
                    }
                }
                accumulate(adj, *table, Tensor::new(ts, d)?);
            }
            Op::Softmax(x) => {
                let n = out.last_dim();
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.len() / n.max(1) {
                    let s = r * n;
                    let dot: f64 = (s..s + n).map(|j| y[j] * gd[j]).sum();
                    for j in s..s + n {
                        d[j] = y[j] * (gd[j] - dot);
                    }
                }
                accumulate(adj, *x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.last_dim();
                let gv = self.value(*gain).data();
                let rows = xhat.len() / d;
                if self.rg(*gain) {
                    let mut dg = vec![0.0; d];
                    for (i, (x, y)) in gd.iter().zip(xhat).enumerate() {
                        dg[i % d] += x * y;
                    }
                    accumulate(adj, *gain, Tensor::new(vec![d], dg)?);
                }
                if self.rg(*bias) {
                    let mut db = vec![0.0; d];
                    for (i, x) in gd.iter().enumerate() {
                        db[i % d] += x;
                    }
                    accumulate(adj, *bias, Tensor::new(vec![d], db)?);
                }
                if self.rg(*input) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let s = r * d;
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gd[s + j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[s + j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gd[s + j] * gv[j];
                            dx[s + j] = inv_std[r] * (dxh - mean_dxh - xhat[s + j] * mean_dxh_xh);
                        }
                    }
                    accumulate(adj, *input, Tensor::new(out.shape().to_vec(), dx)?);
                }
            }
            Op::Dropout { input, keep } => {
                let d = gd.iter().zip(keep).map(|(x, k)| x * k).collect();
                accumulate(adj, *input, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::Lstm(cache) => self.lstm_backward(cache, gd, adj)?,
            Op::CrossEntropy { logits, targets, probs } => {
                let n = self.value(*logits).last_dim();
                let rows = targets.len() as f64;
                let scale = g.item() / rows;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * n + t] -= scale;
                }
                accumulate(adj, *logits, Tensor::new(self.shape(*logits).to_vec(), d)?);
            }
            Op::Bce { probs, targets } => {
                let pv = self.value(*probs);
                let n = pv.last_dim().max(1);
                let rows = (pv.numel() / n).max(1) as f64;
                let scale = g.item() / rows;
                let d = pv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| {
                        let pos = if p > BCE_CLAMP { -y / p } else { 0.0 };
                        let neg = if 1.0 - p > BCE_CLAMP { (1.0 - y) / (1.0 - p) } else { 0.0 };
                        (pos + neg) * scale
                    })
                    .collect();
                accumulate(adj, *probs, Tensor::new(pv.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }

    fn lstm_backward(&self, c: &LstmCache, gd: &[f64], adj: &mut [Option<Tensor>]) -> Result<()> {
        let (b, t, h) = (c.batch, c.steps, c.hidden);
        let g4 = 4 * h;
        let whd = self.value(c.wh).data();
        let mut dxw = vec![0.0; b * t * g4];
        let mut dwh = vec![0.0; h * g4];
        let mut db = vec![0.0; g4];
        let mut dh_next = vec![0.0; b * h];
        let mut dc_next = vec![0.0; b * h];

        for s in (0..t).rev() {
            let step = if c.reverse { t - 1 - s } else { s };
            let gates = &c.gates[s];
            let mut dz = vec![0.0; b * g4];
            let mut dh_carry = vec![0.0; b * h];
            for bi in 0..b {
                let active = c.mask.as_ref().is_none_or(|m| m[bi * t + step]);
                let go = &gd[(bi * t + step) * h..(bi * t + step + 1) * h];
                for j in 0..h {
                    let k = bi * h + j;
                    let dh = go[j] + dh_next[k];
                    if !active {
                        dh_carry[k] = dh;
                        continue;
                    }
                    let zr = &gates[bi * g4..(bi + 1) * g4];
                    let (ig, fg, cg, og) = (zr[j], zr[h + j], zr[2 * h + j], zr[3 * h + j]);
                    let tc = c.tanh_c[s][k];
                    let dc = dc_next[k] + dh * og * (1.0 - tc * tc);
                    let dzr = &mut dz[bi * g4..(bi + 1) * g4];
                    dzr[j] = dc * cg * ig * (1.0 - ig);
                    dzr[h + j] = dc * c.c_prev[s][k] * fg * (1.0 - fg);
                    dzr[2 * h + j] = dc * ig * (1.0 - cg * cg);
                    dzr[3 * h + j] = dh * tc * og * (1.0 - og);
                    dc_next[k] = dc * fg;
                }
            }
            // Inactive rows pass their cell gradient through untouched.
            gemm_nt(&dz, whd, &mut dh_carry, b, g4, h);
            gemm_tn(&c.h_prev[s], &dz, &mut dwh, h, b, g4);
            for bi in 0..b {
                let dzr = &dz[bi * g4..(bi + 1) * g4];
                for (acc, v) in db.iter_mut().zip(dzr) {
                    *acc += v;
                }
                dxw[(bi * t + step) * g4..(bi * t + step + 1) * g4].copy_from_slice(dzr);
            }
            dh_next = dh_carry;
        }

        let xv = self.value(c.x);
        let d = xv.shape()[2];
        if self.rg(c.x) {
            let mut dx = vec![0.0; b * t * d];
            gemm_nt(&dxw, self.value(c.wx).data(), &mut dx, b * t, g4, d);
            accumulate(adj, c.x, Tensor::new(vec![b, t, d], dx)?);
        }
        if self.rg(c.wx) {
            let mut dwx = vec![0.0; d * g4];
            gemm_tn(xv.data(), &dxw, &mut dwx, d, b * t, g4);
            accumulate(adj, c.wx, Tensor::new(vec![d, g4], dwx)?);
        }
        if self.rg(c.wh) {
            accumulate(adj, c.wh, Tensor::new(vec![h, g4], dwh)?);
        }
        if self.rg(c.bias) {
            accumulate(adj, c.bias, Tensor::new(vec![g4], db)?);
        }
        Ok(())
    }
}

pub(crate) const BCE_CLAMP: f64 = 1e-12;

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
