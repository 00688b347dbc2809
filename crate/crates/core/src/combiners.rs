//! Dynamic-scalarization gradient combiners.
//!
//! Every rule produces `g_UN = c_t·g_R − (1 − c_t)·g_F` for some per-step
//! coefficient `c_t ∈ [0, 1]`, except NGDiff which returns the normalized
//! difference `g_R/‖g_R‖ − g_F/‖g_F‖` directly (a positive multiple of the
//! same expression for `c_t = ‖g_F‖ / (‖g_R‖ + ‖g_F‖)`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_layouts, FlatGradient};
use crate::error::{arg_err, Result};
use crate::objectives::LossPair;

/// Gradient norms below this are treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CombinerSpec {
    /// Descent on the retain loss only (`c = 1`).
    Gd,
    /// Ascent on the forget loss only (`c = 0`).
    Ga,
    /// Extended gradient difference with a fixed coefficient.
    GdiffStatic { c: f64 },
    /// `c_t = base + amplitude · decay^t`, a convergent coefficient schedule.
    GdiffScheduled { base: f64, amplitude: f64, decay: f64 },
    /// `c/(1−c) = L_F / L_R`, losses taken as constants.
    LossNorm,
    /// Random loss weighting, `c = softmax(λ)_1` with `λ_i ~ N(0, 1)`.
    Rlw { seed: u64 },
    /// `c/(1−c) = 1 + g_F·g_R / ‖g_R‖²`.
    Pcgrad,
    /// `c = g_F·u / ((g_F − g_R)·u)`, `u = g_F/‖g_F‖ − g_R/‖g_R‖`.
    ImtlG,
    /// Normalized gradient difference.
    Ngdiff,
}

impl CombinerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CombinerSpec::GdiffStatic { c } => {
                if !(0.0..=1.0).contains(&c) {
                    return Err(arg_err(format!("gdiff coefficient c = {c} outside [0, 1]")));
                }
            }
            CombinerSpec::GdiffScheduled {
                base,
                amplitude,
                decay,
            } => {
                if !(0.0..=1.0).contains(&decay) {
                    return Err(arg_err(format!("schedule decay {decay} outside [0, 1]")));
                }
                let hi = base + amplitude.max(0.0);
                let lo = base + amplitude.min(0.0);
                if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
                    return Err(arg_err(format!(
                        "schedule base {base} amplitude {amplitude} leaves [0, 1]"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Short lowercase name used in file names and reports.
    pub fn name(&self) -> String {
        match *self {
            CombinerSpec::Gd => "gd".into(),
            CombinerSpec::Ga => "ga".into(),
            CombinerSpec::GdiffStatic { c } => format!("gdiff-{c}"),
            CombinerSpec::GdiffScheduled { .. } => "gdiff-scheduled".into(),
            CombinerSpec::LossNorm => "lossnorm".into(),
            CombinerSpec::Rlw { .. } => "rlw".into(),
            CombinerSpec::Pcgrad => "pcgrad".into(),
            CombinerSpec::ImtlG => "imtlg".into(),
            CombinerSpec::Ngdiff => "ngdiff".into(),
        }
    }
}

/// Events raised while combining; none of them is an error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombineFlags {
    /// `‖g_R‖` was below [`DEGENERATE_NORM`] where it appears in a denominator.
    pub degenerate_retain: bool,
    pub degenerate_forget: bool,
    /// The rule's raw coefficient left `[0, 1]` and was clamped.
    pub clamped: bool,
}

impl CombineFlags {
    pub fn any(&self) -> bool {
        self.degenerate_retain || self.degenerate_forget || self.clamped
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombinerOutput {
    pub direction: FlatGradient,
    /// Effective `c_t`, always in `[0, 1]`.
    pub coefficient: f64,
    /// True when `direction` is the normalized difference rather than the
    /// `c_t`-weighted form.
    pub direct: bool,
    pub dot_retain: f64,
    pub dot_forget: f64,
    pub norm_retain: f64,
    pub norm_forget: f64,
    pub flags: CombineFlags,
}

impl CombinerOutput {
    /// Cosine between `g_R` and `g_F`, zero if either vanishes.
    pub fn cos_retain_forget(&self, g_r: &FlatGradient, g_f: &FlatGradient) -> f64 {
        if self.norm_retain == 0.0 || self.norm_forget == 0.0 {
            0.0
        } else {
            g_r.dot(g_f) / (self.norm_retain * self.norm_forget)
        }
    }
}

/// Combines per-task gradients into an update direction.
///
/// `step` keys the RLW random stream and the coefficient schedule; every other
/// rule ignores it.
pub fn combine(
    spec: &CombinerSpec,
    g_r: &FlatGradient,
    g_f: &FlatGradient,
    losses: &LossPair,
    step: u64,
) -> Result<CombinerOutput> {
    spec.validate()?;
    check_layouts(g_r.layout(), g_f.layout())?;
    let norm_r = g_r.norm();
    let norm_f = g_f.norm();
    let mut flags = CombineFlags::default();

    let coefficient = match *spec {
        CombinerSpec::Gd => 1.0,
        CombinerSpec::Ga => 0.0,
        CombinerSpec::GdiffStatic { c } => c,
        CombinerSpec::GdiffScheduled {
            base,
            amplitude,
            decay,
        } => (base + amplitude * decay.powf(step as f64)).clamp(0.0, 1.0),
        CombinerSpec::LossNorm => {
            let (lr, lf) = (losses.retain_loss, losses.forget_loss);
            if !(lr > 0.0 && lf > 0.0) {
                return Err(arg_err(format!(
                    "loss normalization needs positive losses, got L_R = {lr}, L_F = {lf}"
                )));
            }
            lf / (lf + lr)
        }
        CombinerSpec::Rlw { seed } => rlw_coefficient(seed, step),
        CombinerSpec::Pcgrad => {
            let ratio = if norm_r < DEGENERATE_NORM {
                flags.degenerate_retain = true;
                1.0
            } else {
                1.0 + g_f.dot(g_r) / (norm_r * norm_r)
            };
            if ratio < 0.0 {
                flags.clamped = true;
                0.0
            } else {
                ratio / (1.0 + ratio)
            }
        }
        CombinerSpec::ImtlG => imtlg_coefficient(g_r, g_f, norm_r, norm_f, &mut flags)?,
        CombinerSpec::Ngdiff => {
            flags.degenerate_retain = norm_r < DEGENERATE_NORM;
            flags.degenerate_forget = norm_f < DEGENERATE_NORM;
            ngdiff_coefficient(norm_r, norm_f)
        }
    };

    let direction = if matches!(spec, CombinerSpec::Ngdiff) {
        let wr = if flags.degenerate_retain { 0.0 } else { 1.0 / norm_r };
        let wf = if flags.degenerate_forget { 0.0 } else { 1.0 / norm_f };
        g_r.lincomb(wr, g_f, -wf)?
    } else {
        g_r.lincomb(coefficient, g_f, -(1.0 - coefficient))?
    };

    Ok(CombinerOutput {
        dot_retain: g_r.dot(&direction),
        dot_forget: g_f.dot(&direction),
        direction,
        coefficient,
        direct: matches!(spec, CombinerSpec::Ngdiff),
        norm_retain: norm_r,
        norm_forget: norm_f,
        flags,
    })
}

/// `(1/‖g_R‖) / (1/‖g_R‖ + 1/‖g_F‖)`, written as `‖g_F‖ / (‖g_R‖ + ‖g_F‖)` so
/// a vanishing norm has a finite limit.
fn ngdiff_coefficient(norm_r: f64, norm_f: f64) -> f64 {
    let s = norm_r + norm_f;
    if s == 0.0 {
        0.5
    } else {
        norm_f / s
    }
}

fn imtlg_coefficient(
    g_r: &FlatGradient,
    g_f: &FlatGradient,
    norm_r: f64,
    norm_f: f64,
    flags: &mut CombineFlags,
) -> Result<f64> {
    flags.degenerate_retain = norm_r < DEGENERATE_NORM;
    flags.degenerate_forget = norm_f < DEGENERATE_NORM;
    let wr = if flags.degenerate_retain { 0.0 } else { 1.0 / norm_r };
    let wf = if flags.degenerate_forget { 0.0 } else { 1.0 / norm_f };
    let u = g_f.lincomb(wf, g_r, -wr)?;
    let num = g_f.dot(&u);
    let den = g_f.dot(&u) - g_r.dot(&u);
    // den = (‖g_R‖ + ‖g_F‖)(1 − cos) vanishes only for parallel, same-sign
    // gradients; the ratio's limit there is ‖g_F‖ / (‖g_R‖ + ‖g_F‖).
    let scale = (norm_r + norm_f).max(f64::MIN_POSITIVE);
    let c = if den.abs() <= 1e-12 * scale {
        ngdiff_coefficient(norm_r, norm_f)
    } else {
        num / den
    };
    if !(0.0..=1.0).contains(&c) {
        flags.clamped = true;
    }
    Ok(if c.is_nan() { 0.5 } else { c.clamp(0.0, 1.0) })
}

/// Two standard normals from the ChaCha stream `(seed, step)`, then
/// `c = e^{λ1} / (e^{λ1} + e^{λ2})`.
pub fn rlw_coefficient(seed: u64, step: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let l1: f64 = StandardNormal.sample(&mut rng);
    let l2: f64 = StandardNormal.sample(&mut rng);
    rlw_from_logits(l1, l2)
}

pub fn rlw_from_logits(l1: f64, l2: f64) -> f64 {
    1.0 / (1.0 + (l2 - l1).exp())
}

/// The `c_t` sequence of a run.
pub fn coefficient_trace(outputs: &[CombinerOutput]) -> Result<Vec<f64>> {
    if outputs.is_empty() {
        return Err(arg_err("coefficient trace of an empty run"));
    }
    Ok(outputs.iter().map(|o| o.coefficient).collect())
}

/// `max |c_t − c_{t−1}|` over the last `window` entries of a trace.
pub fn tail_variation(trace: &[f64], window: usize) -> f64 {
    let start = trace.len().saturating_sub(window.max(1) + 1);
    trace[start..]
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(0.0, f64::max)
}
