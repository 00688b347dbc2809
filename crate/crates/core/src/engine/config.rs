use serde::{Deserialize, Serialize};

use crate::bench::GaussianTask;
use crate::combiners::CombinerSpec;
use crate::error::{arg_err, Result};
use crate::objectives::{ForgetKind, QuadPairProblem};
use crate::scheduler::{LrState, DEFAULT_PROBE_EPSILON, DEFAULT_UPDATE_PERIOD};

/// What produces the update direction each step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    Gd,
    Ga,
    GdiffStatic { c: f64 },
    GdiffScheduled { base: f64, amplitude: f64, decay: f64 },
    LossNorm,
    /// Random loss weighting; its stream is keyed by the method seed.
    Rlw,
    Pcgrad,
    ImtlG,
    Ngdiff,
    /// Negative preference optimization on the forget set alone.
    Npo { beta: f64 },
}

impl MethodSpec {
    /// The gradient combiner, or `None` for loss-level methods.
    pub fn combiner(&self, method_seed: u64) -> Option<CombinerSpec> {
        Some(match *self {
            MethodSpec::Gd => CombinerSpec::Gd,
            MethodSpec::Ga => CombinerSpec::Ga,
            MethodSpec::GdiffStatic { c } => CombinerSpec::GdiffStatic { c },
            MethodSpec::GdiffScheduled {
                base,
                amplitude,
                decay,
            } => CombinerSpec::GdiffScheduled {
                base,
                amplitude,
                decay,
            },
            MethodSpec::LossNorm => CombinerSpec::LossNorm,
            MethodSpec::Rlw => CombinerSpec::Rlw { seed: method_seed },
            MethodSpec::Pcgrad => CombinerSpec::Pcgrad,
            MethodSpec::ImtlG => CombinerSpec::ImtlG,
            MethodSpec::Ngdiff => CombinerSpec::Ngdiff,
            MethodSpec::Npo { .. } => return None,
        })
    }

    pub fn name(&self) -> String {
        match *self {
            MethodSpec::Npo { beta } => format!("npo-{beta}"),
            other => other.combiner(0).map(|c| c.name()).unwrap_or_default(),
        }
    }

    /// Parses `gd`, `ga`, `gdiff-<c>`, `lossnorm`, `rlw`, `pcgrad`, `imtlg`,
    /// `ngdiff`, `npo` or `npo-<beta>`.
    pub fn parse(name: &str) -> Result<Self> {
        let lower = name.trim().to_ascii_lowercase();
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| arg_err(format!("bad number {s:?} in method {name:?}")))
        };
        let m = match lower.as_str() {
            "gd" => MethodSpec::Gd,
            "ga" => MethodSpec::Ga,
            "gdiff" => MethodSpec::GdiffStatic { c: 0.5 },
            "lossnorm" => MethodSpec::LossNorm,
            "rlw" => MethodSpec::Rlw,
            "pcgrad" => MethodSpec::Pcgrad,
            "imtlg" | "imtl-g" => MethodSpec::ImtlG,
            "ngdiff" => MethodSpec::Ngdiff,
            "npo" => MethodSpec::Npo { beta: 1.0 },
            s => {
                if let Some(c) = s.strip_prefix("gdiff-") {
                    MethodSpec::GdiffStatic { c: num(c)? }
                } else if let Some(b) = s.strip_prefix("npo-") {
                    MethodSpec::Npo { beta: num(b)? }
                } else {
                    return Err(arg_err(format!("unknown method {name:?}")));
                }
            }
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MethodSpec::Npo { beta } => {
                if !(*beta > 0.0 && beta.is_finite()) {
                    return Err(arg_err(format!("method.beta = {beta} must be positive")));
                }
                Ok(())
            }
            other => other.combiner(0).unwrap().validate(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrMode {
    Fixed {
        eta: f64,
    },
    /// Probe-based step size, refit every `update_period` steps.
    Auto {
        #[serde(default = "default_period")]
        update_period: u64,
        #[serde(default = "default_epsilon")]
        probe_epsilon: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        initial_eta: Option<f64>,
    },
}

fn default_period() -> u64 {
    DEFAULT_UPDATE_PERIOD
}

fn default_epsilon() -> f64 {
    DEFAULT_PROBE_EPSILON
}

impl LrMode {
    pub fn auto() -> Self {
        LrMode::Auto {
            update_period: DEFAULT_UPDATE_PERIOD,
            probe_epsilon: DEFAULT_PROBE_EPSILON,
            initial_eta: None,
        }
    }

    pub fn initial_state(&self) -> Result<Option<LrState>> {
        match *self {
            LrMode::Fixed { .. } => Ok(None),
            LrMode::Auto {
                update_period,
                probe_epsilon,
                initial_eta,
            } => {
                let s = LrState::new(update_period, probe_epsilon)?;
                Ok(Some(match initial_eta {
                    Some(eta) => s.with_initial_eta(eta)?,
                    None => s,
                }))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LrMode::Fixed { eta } = *self {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(arg_err(format!("lr.eta = {eta} must be positive")));
            }
        }
        self.initial_state().map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub method: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSpec {
    pub steps: usize,
    pub eta: f64,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        Self {
            steps: 400,
            eta: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadPairSpec {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    #[serde(default)]
    pub forget_kind: ForgetKind,
    /// Starting point; defaults to the forget anchor `b`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
}

impl QuadPairSpec {
    pub fn problem(&self) -> QuadPairProblem {
        QuadPairProblem {
            a: self.a.clone(),
            b: self.b.clone(),
            forget_kind: self.forget_kind,
        }
    }

    pub fn start(&self) -> Vec<f64> {
        self.theta0.clone().unwrap_or_else(|| self.b.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSpec {
    #[serde(default)]
    pub task: GaussianTask,
    #[serde(default)]
    pub finetune: FinetuneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    /// Analytic quadratic pair, full-batch, started fresh.
    QuadPair(QuadPairSpec),
    /// Synthetic classification, fine-tuned on R ∪ F before unlearning.
    Gaussian(GaussianSpec),
}

impl ProblemSpec {
    pub fn quad(a: Vec<f64>, b: Vec<f64>, forget_kind: ForgetKind, theta0: Option<Vec<f64>>) -> Self {
        ProblemSpec::QuadPair(QuadPairSpec {
            a,
            b,
            forget_kind,
            theta0,
        })
    }

    pub fn gaussian_default() -> Self {
        ProblemSpec::Gaussian(GaussianSpec {
            task: GaussianTask::default(),
            finetune: FinetuneSpec::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ProblemSpec::QuadPair(q) => {
                let problem = q.problem();
                problem.validate()?;
                if let Some(t) = &q.theta0 {
                    if t.len() != problem.dim() {
                        return Err(arg_err(format!(
                            "problem.theta0 has {} entries, anchors have {}",
                            t.len(),
                            problem.dim()
                        )));
                    }
                }
                Ok(())
            }
            ProblemSpec::Gaussian(g) => {
                let t = &g.task;
                if t.classes < 2 || t.per_class == 0 || t.dim < t.classes {
                    return Err(arg_err(
                        "problem.task needs classes >= 2, per_class >= 1, dim >= classes",
                    ));
                }
                if !(t.separation > 0.0) {
                    return Err(arg_err("problem.task.separation must be positive"));
                }
                if t.forget_class >= t.classes {
                    return Err(arg_err("problem.task.forget_class out of range"));
                }
                if t.hidden.iter().any(|&w| w == 0) {
                    return Err(arg_err("problem.task.hidden widths must be positive"));
                }
                if !(g.finetune.eta > 0.0 && g.finetune.eta.is_finite()) {
                    return Err(arg_err("problem.finetune.eta must be positive"));
                }
                Ok(())
            }
        }
    }
}

/// Everything needed to reproduce one unlearning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: MethodSpec,
    pub lr: LrMode,
    pub steps: usize,
    /// Minibatch size per task; `None` means full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub seeds: Seeds,
    pub problem: ProblemSpec,
    /// Full-split evaluation cadence for classification problems.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_eval_every() -> usize {
    1
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.lr.validate()?;
        self.problem.validate()?;
        if self.steps == 0 {
            return Err(arg_err("steps must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(arg_err("eval_every must be at least 1"));
        }
        if self.batch_size == Some(0) {
            return Err(arg_err("batch_size must be positive"));
        }
        if matches!(self.method, MethodSpec::Npo { .. })
            && !matches!(self.problem, ProblemSpec::Gaussian(_))
        {
            return Err(arg_err("npo needs a classification problem"));
        }
        Ok(())
    }

    /// Returns a copy with one sweepable parameter replaced.
    ///
    /// `c` sets a static gradient-difference coefficient, `eta` a fixed step
    /// size, `beta` the NPO temperature, `method` the method by name.
    pub fn with_param(&self, name: &str, value: &str) -> Result<RunConfig> {
        let mut cfg = self.clone();
        let num = || {
            value
                .trim()
                .parse::<f64>()
                .map_err(|_| arg_err(format!("bad value {value:?} for {name}")))
        };
        match name {
            "c" => match cfg.method {
                MethodSpec::GdiffStatic { .. } => cfg.method = MethodSpec::GdiffStatic { c: num()? },
                _ => return Err(arg_err("sweeping c needs method gdiff_static")),
            },
            "eta" => cfg.lr = LrMode::Fixed { eta: num()? },
            "beta" => match cfg.method {
                MethodSpec::Npo { .. } => cfg.method = MethodSpec::Npo { beta: num()? },
                _ => return Err(arg_err("sweeping beta needs method npo")),
            },
            "method" => cfg.method = MethodSpec::parse(value)?,
            other => {
                return Err(arg_err(format!(
                    "parameter {other:?} is not sweepable (c, eta, beta, method)"
                )))
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
