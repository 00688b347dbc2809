//! Loss definitions: the retain/forget loss pair, the NPO forget loss, and
//! analytic two-task quadratics with closed-form optima.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_row, Graph, ParameterVector, Tensor};
use crate::bench::LabeledBatch;
use crate::error::{arg_err, dim_err, Error, Result};

/// Current retain and forget losses with the sample counts they average over.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPair {
    pub retain_loss: f64,
    pub forget_loss: f64,
    pub retain_count: usize,
    pub forget_count: usize,
}

impl LossPair {
    pub fn new(retain_loss: f64, forget_loss: f64, retain_count: usize, forget_count: usize) -> Result<Self> {
        if !retain_loss.is_finite() || !forget_loss.is_finite() {
            return Err(arg_err(format!(
                "losses must be finite, got ({retain_loss}, {forget_loss})"
            )));
        }
        if retain_count == 0 || forget_count == 0 {
            return Err(arg_err("sample counts must be at least 1"));
        }
        Ok(Self {
            retain_loss,
            forget_loss,
            retain_count,
            forget_count,
        })
    }
}

/// Probabilities below this are clamped before taking the reference log.
pub const NPO_PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct NpoConfig {
    pub beta: f64,
    pub reference_params: ParameterVector,
}

impl NpoConfig {
    pub fn new(beta: f64, reference_params: ParameterVector) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(arg_err(format!("NPO beta must be positive, got {beta}")));
        }
        Ok(Self {
            beta,
            reference_params,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NpoValue {
    pub loss: f64,
    /// Samples whose reference probability was clamped to [`NPO_PROB_FLOOR`].
    pub clamped: usize,
}

/// `-(2/beta) * mean log sigmoid(-beta * (log f - log f_ref))` over the forget
/// batch, where `f` is the live model's probability of the true label.
///
/// The forward pass is recorded on `model`, so a following
/// [`Graph::backward`] differentiates it with respect to the live parameters.
/// The reference model only enters as constants.
pub fn npo_loss(
    model: &mut Graph,
    params: &ParameterVector,
    forget_batch: &LabeledBatch,
    cfg: &NpoConfig,
) -> Result<NpoValue> {
    crate::autodiff::check_layouts(params.layout(), cfg.reference_params.layout())?;
    let (ref_logp, clamped) = reference_log_probs(model, &cfg.reference_params, forget_batch)?;
    let beta = cfg.beta;
    let loss = model.forward_with(params, forget_batch, |tape, logits, batch| {
        let logp = tape.log_softmax_pick(logits, batch.labels())?;
        let reference = tape.constant(Tensor::new(vec![ref_logp.len()], ref_logp)?)?;
        let ratio = tape.sub(logp, reference)?;
        let z = tape.scale(ratio, -beta)?;
        let ls = tape.log_sigmoid(z)?;
        let m = tape.mean(ls)?;
        tape.scale(m, -2.0 / beta)
    })?;
    Ok(NpoValue { loss, clamped })
}

fn reference_log_probs(
    model: &Graph,
    reference: &ParameterVector,
    batch: &LabeledBatch,
) -> Result<(Vec<f64>, usize)> {
    let logits = model.logits(reference, batch.features())?;
    let floor = NPO_PROB_FLOOR.ln();
    let mut clamped = 0;
    let logp = batch
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let (_, lp) = log_softmax_row(logits.row(i));
            if lp[y] < floor {
                clamped += 1;
                floor
            } else {
                lp[y]
            }
        })
        .collect();
    Ok((logp, clamped))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForgetKind {
    /// `L_F = ½‖θ − b‖²`
    #[default]
    UnboundedQuadratic,
    /// `L_F = 1 − exp(−½‖θ − b‖²)`, always in `[0, 1)`.
    BoundedExp,
}

/// Retain loss `½‖θ − a‖²` paired with a forget loss anchored at `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadPairProblem {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    #[serde(default)]
    pub forget_kind: ForgetKind,
}

impl QuadPairProblem {
    pub fn new(a: Vec<f64>, b: Vec<f64>, forget_kind: ForgetKind) -> Result<Self> {
        let p = Self { a, b, forget_kind };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.is_empty() || self.a.len() != self.b.len() {
            return Err(dim_err(format!(
                "anchors have lengths {} and {}",
                self.a.len(),
                self.b.len()
            )));
        }
        if self.a == self.b {
            return Err(arg_err("retain and forget anchors coincide"));
        }
        if self.a.iter().chain(&self.b).any(|v| !v.is_finite()) {
            return Err(arg_err("anchors must be finite"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(dim_err(format!(
                "theta has {} entries, problem dimension is {}",
                theta.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn retain_loss(&self, theta: &[f64]) -> Result<f64> {
        self.check(theta)?;
        Ok(half_sq_dist(theta, &self.a))
    }

    pub fn forget_loss(&self, theta: &[f64]) -> Result<f64> {
        self.check(theta)?;
        let r = half_sq_dist(theta, &self.b);
        Ok(match self.forget_kind {
            ForgetKind::UnboundedQuadratic => r,
            ForgetKind::BoundedExp => -(-r).exp_m1(),
        })
    }

    pub fn retain_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check(theta)?;
        Ok(theta.iter().zip(&self.a).map(|(t, a)| t - a).collect())
    }

    pub fn forget_grad(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check(theta)?;
        let w = match self.forget_kind {
            ForgetKind::UnboundedQuadratic => 1.0,
            ForgetKind::BoundedExp => (-half_sq_dist(theta, &self.b)).exp(),
        };
        Ok(theta.iter().zip(&self.b).map(|(t, b)| w * (t - b)).collect())
    }
}

fn half_sq_dist(x: &[f64], y: &[f64]) -> f64 {
    0.5 * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

pub fn quad_retain(problem: &QuadPairProblem, theta: &[f64]) -> Result<f64> {
    problem.retain_loss(theta)
}

pub fn quad_forget(problem: &QuadPairProblem, theta: &[f64]) -> Result<f64> {
    problem.forget_loss(theta)
}

fn check_coefficient(c: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&c) {
        return Err(arg_err(format!("coefficient c = {c} outside [0, 1]")));
    }
    Ok(())
}

/// Static scalarization `c·L_R(θ) − (1−c)·L_F(θ)`.
pub fn lsp_value(problem: &QuadPairProblem, theta: &[f64], c: f64) -> Result<f64> {
    check_coefficient(c)?;
    Ok(c * problem.retain_loss(theta)? - (1.0 - c) * problem.forget_loss(theta)?)
}

/// Gradient of [`lsp_value`] in θ.
pub fn lsp_gradient(problem: &QuadPairProblem, theta: &[f64], c: f64) -> Result<Vec<f64>> {
    check_coefficient(c)?;
    let gr = problem.retain_grad(theta)?;
    let gf = problem.forget_grad(theta)?;
    Ok(gr.iter().zip(&gf).map(|(r, f)| c * r - (1.0 - c) * f).collect())
}

/// The unique minimizer `(c·a − (1−c)·b) / (2c − 1)` of the unbounded
/// quadratic scalarization, which is strictly convex only for `c > ½`.
pub fn lsp_closed_form_minimizer(problem: &QuadPairProblem, c: f64) -> Result<Vec<f64>> {
    check_coefficient(c)?;
    if problem.forget_kind != ForgetKind::UnboundedQuadratic {
        return Err(arg_err(
            "closed-form minimizer exists only for the unbounded quadratic forget loss",
        ));
    }
    if c <= 0.5 {
        return Err(Error::Unbounded(format!(
            "c = {c} <= 0.5 leaves the scalarized objective unbounded below"
        )));
    }
    let denom = 2.0 * c - 1.0;
    Ok(problem
        .a
        .iter()
        .zip(&problem.b)
        .map(|(a, b)| (c * a - (1.0 - c) * b) / denom)
        .collect())
}
