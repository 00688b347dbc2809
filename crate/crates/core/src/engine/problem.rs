//! Per-task loss and gradient access for the unlearning loop.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{FlatGradient, Graph, Layout, ParameterVector};
use crate::bench::{ForgetRetainSplit, LabeledBatch};
use crate::error::{arg_err, Result};
use crate::objectives::{npo_loss, NpoConfig, QuadPairProblem};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Retain,
    Forget,
}

/// Accuracy and mean loss on the full retain and forget sets.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalResult {
    pub acc_retain: f64,
    pub acc_forget: f64,
    pub loss_retain: f64,
    pub loss_forget: f64,
}

/// 0/1 accuracy by argmax and mean cross-entropy on both halves of a split.
pub fn evaluate(model: &Graph, params: &ParameterVector, split: &ForgetRetainSplit) -> Result<EvalResult> {
    let (acc_retain, loss_retain) = accuracy_and_loss(model, params, &split.retain)?;
    let (acc_forget, loss_forget) = accuracy_and_loss(model, params, &split.forget)?;
    Ok(EvalResult {
        acc_retain,
        acc_forget,
        loss_retain,
        loss_forget,
    })
}

fn accuracy_and_loss(model: &Graph, params: &ParameterVector, batch: &LabeledBatch) -> Result<(f64, f64)> {
    let logits = model.logits(params, batch.features())?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (i, &y) in batch.labels().iter().enumerate() {
        let row = logits.row(i);
        let argmax = row
            .iter()
            .enumerate()
            .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
        if argmax == y {
            correct += 1;
        }
        let (_, logp) = crate::autodiff::log_softmax_row(row);
        loss -= logp[y];
    }
    let n = batch.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Cycles through `0..n` in reshuffled epochs of `batch_size` indices.
#[derive(Clone, Debug)]
pub struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    shuffle: bool,
}

impl BatchCycler {
    /// `batch_size = None` (or `>= n`) yields the full set every time, unshuffled.
    pub fn new(n: usize, batch_size: Option<usize>, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let bs = batch_size.unwrap_or(n).min(n).max(1);
        let shuffle = bs < n;
        let mut order: Vec<usize> = (0..n).collect();
        if shuffle {
            order.shuffle(&mut rng);
        }
        Self {
            order,
            pos: 0,
            batch_size: bs,
            rng,
            shuffle,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if !self.shuffle {
            return self.order.clone();
        }
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let take = (self.batch_size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// What the loop needs from a two-task problem.
pub trait TwoTaskObjective {
    fn layout(&self) -> Arc<Layout>;

    /// Draws the step's minibatches.
    fn begin_step(&mut self) -> Result<()>;

    /// Samples behind the current retain and forget minibatches.
    fn batch_counts(&self) -> (usize, usize);

    /// One forward and one backward pass on the current minibatch of `task`.
    fn loss_grad(&mut self, task: Task, params: &ParameterVector) -> Result<(f64, FlatGradient)>;

    /// Gradient-free loss on the current minibatch of `task`.
    fn loss(&self, task: Task, params: &ParameterVector) -> Result<f64>;

    /// NPO loss and gradient on the current forget minibatch.
    fn npo_loss_grad(&mut self, params: &ParameterVector, beta: f64) -> Result<(f64, FlatGradient)>;

    /// Full-split metrics; `None` when accuracy is meaningless.
    fn evaluate(&self, params: &ParameterVector) -> Result<Option<EvalResult>>;

    /// Exact full-data losses `(L_R, L_F)`.
    fn full_losses(&self, params: &ParameterVector) -> Result<(f64, f64)>;
}

/// Analytic quadratic pair; every "batch" is the whole objective.
#[derive(Clone, Debug)]
pub struct QuadObjective {
    problem: QuadPairProblem,
    layout: Arc<Layout>,
}

impl QuadObjective {
    pub fn new(problem: QuadPairProblem) -> Result<Self> {
        problem.validate()?;
        let layout = Arc::new(Layout::flat(problem.dim()));
        Ok(Self { problem, layout })
    }

    pub fn problem(&self) -> &QuadPairProblem {
        &self.problem
    }

    pub fn params(&self, theta: Vec<f64>) -> Result<ParameterVector> {
        ParameterVector::new(theta, self.layout.clone())
    }
}

impl TwoTaskObjective for QuadObjective {
    fn layout(&self) -> Arc<Layout> {
        self.layout.clone()
    }

    fn begin_step(&mut self) -> Result<()> {
        Ok(())
    }

    fn batch_counts(&self) -> (usize, usize) {
        (1, 1)
    }

    fn loss_grad(&mut self, task: Task, params: &ParameterVector) -> Result<(f64, FlatGradient)> {
        let th = params.data();
        let (l, g) = match task {
            Task::Retain => (self.problem.retain_loss(th)?, self.problem.retain_grad(th)?),
            Task::Forget => (self.problem.forget_loss(th)?, self.problem.forget_grad(th)?),
        };
        Ok((l, FlatGradient::new(g, self.layout.clone())?))
    }

    fn loss(&self, task: Task, params: &ParameterVector) -> Result<f64> {
        match task {
            Task::Retain => self.problem.retain_loss(params.data()),
            Task::Forget => self.problem.forget_loss(params.data()),
        }
    }

    fn npo_loss_grad(&mut self, _: &ParameterVector, _: f64) -> Result<(f64, FlatGradient)> {
        Err(arg_err("npo needs a classification problem"))
    }

    fn evaluate(&self, _: &ParameterVector) -> Result<Option<EvalResult>> {
        Ok(None)
    }

    fn full_losses(&self, params: &ParameterVector) -> Result<(f64, f64)> {
        Ok((
            self.problem.retain_loss(params.data())?,
            self.problem.forget_loss(params.data())?,
        ))
    }
}

/// Classifier on a forget/retain split with independent minibatch streams.
#[derive(Clone, Debug)]
pub struct ClassifierObjective {
    graph: Graph,
    split: ForgetRetainSplit,
    reference: ParameterVector,
    retain_cycler: BatchCycler,
    forget_cycler: BatchCycler,
    retain_batch: LabeledBatch,
    forget_batch: LabeledBatch,
    npo_clamped: usize,
}

impl ClassifierObjective {
    /// `reference` is the pre-unlearning snapshot (NPO's frozen model).
    pub fn new(
        graph: Graph,
        split: ForgetRetainSplit,
        reference: ParameterVector,
        batch_size: Option<usize>,
        shuffle_seed: u64,
    ) -> Result<Self> {
        let retain_cycler = BatchCycler::new(split.retain.len(), batch_size, shuffle_seed, 1);
        let forget_cycler = BatchCycler::new(split.forget.len(), batch_size, shuffle_seed, 2);
        let retain_batch = split.retain.clone();
        let forget_batch = split.forget.clone();
        Ok(Self {
            graph,
            split,
            reference,
            retain_cycler,
            forget_cycler,
            retain_batch,
            forget_batch,
            npo_clamped: 0,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn split(&self) -> &ForgetRetainSplit {
        &self.split
    }

    pub fn npo_clamped(&self) -> usize {
        self.npo_clamped
    }

    fn batch(&self, task: Task) -> &LabeledBatch {
        match task {
            Task::Retain => &self.retain_batch,
            Task::Forget => &self.forget_batch,
        }
    }
}

impl TwoTaskObjective for ClassifierObjective {
    fn layout(&self) -> Arc<Layout> {
        self.graph.layout().clone()
    }

    fn begin_step(&mut self) -> Result<()> {
        let r = self.retain_cycler.next_batch();
        let f = self.forget_cycler.next_batch();
        self.retain_batch = self.split.retain.select(&r)?;
        self.forget_batch = self.split.forget.select(&f)?;
        Ok(())
    }

    fn batch_counts(&self) -> (usize, usize) {
        (self.retain_batch.len(), self.forget_batch.len())
    }

    fn loss_grad(&mut self, task: Task, params: &ParameterVector) -> Result<(f64, FlatGradient)> {
        let batch = match task {
            Task::Retain => &self.retain_batch,
            Task::Forget => &self.forget_batch,
        };
        let loss = self.graph.forward(params, batch)?;
        let grad = self.graph.backward()?;
        Ok((loss, grad))
    }

    fn loss(&self, task: Task, params: &ParameterVector) -> Result<f64> {
        self.graph.loss(params, self.batch(task))
    }

    fn npo_loss_grad(&mut self, params: &ParameterVector, beta: f64) -> Result<(f64, FlatGradient)> {
        let cfg = NpoConfig::new(beta, self.reference.clone())?;
        let v = npo_loss(&mut self.graph, params, &self.forget_batch, &cfg)?;
        self.npo_clamped += v.clamped;
        let grad = self.graph.backward()?;
        Ok((v.loss, grad))
    }

    fn evaluate(&self, params: &ParameterVector) -> Result<Option<EvalResult>> {
        evaluate(&self.graph, params, &self.split).map(Some)
    }

    fn full_losses(&self, params: &ParameterVector) -> Result<(f64, f64)> {
        let e = evaluate(&self.graph, params, &self.split)?;
        Ok((e.loss_retain, e.loss_forget))
    }
}
