use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::params::{FlatGradient, Layout, ParameterVector};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::bench::LabeledBatch;
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

/// A fully connected classifier together with the tape of its most recent
/// forward pass.
///
/// Layer `l` owns segments `w{l}` with shape `[in, out]` and `b{l}` with shape
/// `[out]`. Hidden layers apply the activation; the last layer emits logits.
#[derive(Clone, Debug)]
pub struct Graph {
    widths: Vec<usize>,
    activation: Activation,
    layout: Arc<Layout>,
    recorded: Option<(Tape, Var)>,
}

impl Graph {
    pub fn mlp(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(crate::error::arg_err(format!(
                "an MLP needs at least two positive widths, got {widths:?}"
            )));
        }
        let mut layout = Layout::new();
        for (l, pair) in widths.windows(2).enumerate() {
            layout.push(format!("w{l}"), vec![pair[0], pair[1]]);
            layout.push(format!("b{l}"), vec![pair[1]]);
        }
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            layout: Arc::new(layout),
            recorded: None,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn class_count(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Number of nodes on the current tape, zero when nothing is recorded.
    pub fn recorded_nodes(&self) -> usize {
        self.recorded.as_ref().map_or(0, |(t, _)| t.len())
    }

    /// Records the logits of `features` onto `tape`.
    pub fn record_logits(
        &self,
        tape: &mut Tape,
        params: &ParameterVector,
        features: &Tensor,
    ) -> Result<Var> {
        let (n, d) = features.dims2()?;
        if n == 0 {
            return Err(dim_err("empty batch"));
        }
        if d != self.input_width() {
            return Err(dim_err(format!(
                "batch has {d} features, model expects {}",
                self.input_width()
            )));
        }
        let seg = tape.parameters(params)?;
        let mut h = tape.constant(features.clone())?;
        let layers = self.widths.len() - 1;
        for l in 0..layers {
            let z = tape.matmul(h, seg[2 * l])?;
            let z = tape.add_bias(z, seg[2 * l + 1])?;
            h = if l + 1 < layers {
                match self.activation {
                    Activation::Tanh => tape.tanh(z)?,
                    Activation::Relu => tape.relu(z)?,
                }
            } else {
                z
            };
        }
        Ok(h)
    }

    /// Mean cross-entropy of `batch`; the tape is kept for [`Graph::backward`].
    pub fn forward(&mut self, params: &ParameterVector, batch: &LabeledBatch) -> Result<f64> {
        self.forward_with(params, batch, |tape, logits, batch| {
            tape.softmax_cross_entropy(logits, batch.labels())
        })
    }

    /// Forward pass with a caller-supplied loss head on top of the logits.
    pub fn forward_with<F>(
        &mut self,
        params: &ParameterVector,
        batch: &LabeledBatch,
        head: F,
    ) -> Result<f64>
    where
        F: FnOnce(&mut Tape, Var, &LabeledBatch) -> Result<Var>,
    {
        self.recorded = None;
        let mut tape = Tape::new(self.layout.clone());
        let logits = self.record_logits(&mut tape, params, batch.features())?;
        let loss = head(&mut tape, logits, batch)?;
        let value = tape.value(loss);
        if value.len() != 1 {
            return Err(dim_err(format!(
                "loss head produced shape {:?}",
                value.shape()
            )));
        }
        let v = value.data()[0];
        self.recorded = Some((tape, loss));
        Ok(v)
    }

    /// Gradient of the last forward loss. Consumes the recorded tape.
    pub fn backward(&mut self) -> Result<FlatGradient> {
        let (tape, loss) = self
            .recorded
            .take()
            .ok_or_else(|| Error::State("backward called without a preceding forward".into()))?;
        tape.backward(loss)
    }

    /// Gradient-free logits, `[n, classes]`.
    pub fn logits(&self, params: &ParameterVector, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(self.layout.clone());
        let out = self.record_logits(&mut tape, params, features)?;
        Ok(tape.value(out).clone())
    }

    /// Gradient-free mean cross-entropy; leaves any recorded tape alone.
    pub fn loss(&self, params: &ParameterVector, batch: &LabeledBatch) -> Result<f64> {
        let mut tape = Tape::new(self.layout.clone());
        let logits = self.record_logits(&mut tape, params, batch.features())?;
        let loss = tape.softmax_cross_entropy(logits, batch.labels())?;
        Ok(tape.value(loss).data()[0])
    }
}
