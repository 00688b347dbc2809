//! Wengert-list reverse-mode differentiation.
//!
//! Every operation is appended to the tape with its forward value cached, so
//! node inputs always precede the node. `backward` walks the list in reverse
//! and scatters parameter adjoints into a `FlatGradient`.

use std::sync::Arc;

use super::params::{FlatGradient, Layout, ParameterVector};
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param { segment: usize },
    Constant,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    LogSoftmaxPick {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param { .. } => "param",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::LogSigmoid(..) => "log_sigmoid",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::LogSoftmaxPick { .. } => "log_softmax_pick",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// A single-use recording of one forward computation.
#[derive(Clone, Debug)]
pub struct Tape {
    layout: Arc<Layout>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new(layout: Arc<Layout>) -> Self {
        Self {
            layout,
            nodes: Vec::new(),
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
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

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        let idx = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: idx,
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(idx))
    }

    /// Registers every segment of `params` as a leaf, returning one var per segment.
    pub fn parameters(&mut self, params: &ParameterVector) -> Result<Vec<Var>> {
        super::params::check_layouts(&self.layout, params.layout())?;
        let layout = self.layout.clone();
        layout
            .segments()
            .iter()
            .enumerate()
            .map(|(i, seg)| {
                let t = Tensor::new(seg.shape.clone(), params.segment_data(i).to_vec())?;
                self.push(Op::Param { segment: i }, t)
            })
            .collect()
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Constant, t)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xt.shape().to_vec(), data)?;
        self.push(op, t)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(dim_err(format!(
                "{}: shapes {:?} and {:?} differ",
                op.name(),
                at.shape(),
                bt.shape()
            )));
        }
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(at.shape().to_vec(), data)?;
        self.push(op, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(dim_err(format!(
                "matmul: inner dimensions {k} and {k2} differ"
            )));
        }
        let data = matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        let t = Tensor::matrix(n, m, data)?;
        self.push(Op::MatMul(a, b), t)
    }

    /// Adds a length-`m` bias to every row of an `[n, m]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        let bt = self.value(bias);
        if bt.len() != m {
            return Err(dim_err(format!(
                "add_bias: bias has {} entries, rows have {m}",
                bt.len()
            )));
        }
        let xt = self.value(x);
        let mut data = xt.data().to_vec();
        for row in data.chunks_mut(m) {
            for (v, b) in row.iter_mut().zip(bt.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        self.push(Op::AddBias(x, bias), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// `log(sigmoid(x))`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::LogSigmoid(x), log_sigmoid)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (probs, logp) = self.softmax_rows(logits, labels)?;
        let loss = -logp.iter().sum::<f64>() / labels.len() as f64;
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        )
    }

    /// Per-row `log softmax(logits)[label]`, shape `[n]`.
    pub fn log_softmax_pick(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (probs, logp) = self.softmax_rows(logits, labels)?;
        let n = logp.len();
        self.push(
            Op::LogSoftmaxPick {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::new(vec![n], logp)?,
        )
    }

    fn softmax_rows(&self, logits: Var, labels: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = self.value(logits);
        let (n, m) = t.dims2()?;
        if labels.len() != n {
            return Err(dim_err(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        let mut probs = Vec::with_capacity(n * m);
        let mut logp = Vec::with_capacity(n);
        for (i, &y) in labels.iter().enumerate() {
            if y >= m {
                return Err(dim_err(format!("label {y} out of range for {m} classes")));
            }
            let (p, lp) = log_softmax_row(t.row(i));
            logp.push(lp[y]);
            probs.extend(p);
        }
        Ok((probs, logp))
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<FlatGradient> {
        if self.value(loss).len() != 1 {
            return Err(dim_err(format!(
                "backward needs a scalar, node {} has shape {:?}",
                loss.0,
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut out = FlatGradient::zeros(self.layout.clone());

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param { segment } => {
                    let range = self.layout.segment(*segment).range();
                    for (o, v) in out.data_mut()[range].iter_mut().zip(&g) {
                        *o += v;
                    }
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (n, k) = self.value(*a).dims2()?;
                    let (_, m) = self.value(*b).dims2()?;
                    let da = matmul_nt(&g, self.value(*b).data(), n, m, k);
                    let db = matmul_tn(self.value(*a).data(), &g, n, k, m);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::AddBias(x, b) => {
                    let m = self.value(*b).len();
                    let mut db = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut adj, *b, db);
                    accumulate(&mut adj, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.iter().map(|v| -v).collect());
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let da = g.iter().zip(bv).map(|(g, y)| g * y).collect();
                    let db = g.iter().zip(av).map(|(g, x)| g * x).collect();
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Scale(x, s) => {
                    accumulate(&mut adj, *x, g.iter().map(|v| v * s).collect());
                }
                Op::AddScalar(x) => accumulate(&mut adj, *x, g),
                Op::Tanh(x) => {
                    let y = node.value.data();
                    let d = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut adj, *x, d);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let d = g
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *x, d);
                }
                Op::Square(x) => {
                    let xv = self.value(*x).data();
                    let d = g.iter().zip(xv).map(|(g, x)| 2.0 * x * g).collect();
                    accumulate(&mut adj, *x, d);
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    let d = g.iter().zip(y).map(|(g, y)| g * y).collect();
                    accumulate(&mut adj, *x, d);
                }
                Op::Log(x) => {
                    let xv = self.value(*x).data();
                    let d = g.iter().zip(xv).map(|(g, x)| g / x).collect();
                    accumulate(&mut adj, *x, d);
                }
                Op::LogSigmoid(x) => {
                    // d/dx log sigmoid(x) = sigmoid(-x)
                    let xv = self.value(*x).data();
                    let d = g.iter().zip(xv).map(|(g, &x)| g * sigmoid(-x)).collect();
                    accumulate(&mut adj, *x, d);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut adj, *x, vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut adj, *x, vec![g[0] / n as f64; n]);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len();
                    let m = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        d[i * m + y] -= scale;
                    }
                    accumulate(&mut adj, *logits, d);
                }
                Op::LogSoftmaxPick {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len();
                    let m = probs.len() / n;
                    let mut d = vec![0.0; n * m];
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..m {
                            d[i * m + j] = -g[i] * probs[i * m + j];
                        }
                        d[i * m + y] += g[i];
                    }
                    accumulate(&mut adj, *logits, d);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Returns `(softmax(row), log_softmax(row))`.
pub(crate) fn log_softmax_row(row: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let logp: Vec<f64> = row.iter().map(|v| v - lse).collect();
    let p = logp.iter().map(|v| v.exp()).collect();
    (p, logp)
}
