//! Probe-based learning-rate selection.
//!
//! Along an update direction `d` the retain loss is sampled at
//! `θ − p·d`, `θ`, `θ + p·d`. The parabola through those points yields the
//! directional slope `G·d` and curvature `½·d·H·d` by central differences, and
//! the step `η* = G·d / (d·H·d)` minimizing `L_R(θ − η·d)`. No Hessian is
//! formed; each refit costs two gradient-free forward passes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{axpy_update, FlatGradient, ParameterVector};
use crate::error::{arg_err, Error, Result};

/// Fitted curvature at or below this trips the guard.
pub const CURVATURE_FLOOR: f64 = 1e-12;
/// Shrink-and-retry attempts after a non-finite probe loss.
pub const MAX_PROBE_RETRIES: usize = 3;

pub const DEFAULT_UPDATE_PERIOD: u64 = 10;
pub const DEFAULT_PROBE_EPSILON: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedCoefficients {
    /// Estimate of `g_R·d`.
    pub first: f64,
    /// Estimate of `½·d·H_R·d`.
    pub second: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrState {
    /// Step size in use. Until the first successful fit it equals `probe_epsilon`.
    pub eta: f64,
    pub initialized: bool,
    pub last_update_step: Option<u64>,
    pub update_period: u64,
    pub probe_epsilon: f64,
    pub fitted: Option<FittedCoefficients>,
    pub guard_trips: u64,
    /// Gradient-free forward passes spent on probes.
    pub probe_passes: u64,
}

impl Default for LrState {
    fn default() -> Self {
        Self::new(DEFAULT_UPDATE_PERIOD, DEFAULT_PROBE_EPSILON).unwrap()
    }
}

impl LrState {
    pub fn new(update_period: u64, probe_epsilon: f64) -> Result<Self> {
        if update_period == 0 {
            return Err(arg_err("update period must be at least 1"));
        }
        if !(probe_epsilon > 0.0 && probe_epsilon.is_finite()) {
            return Err(arg_err(format!(
                "probe epsilon must be positive, got {probe_epsilon}"
            )));
        }
        Ok(Self {
            eta: probe_epsilon,
            initialized: false,
            last_update_step: None,
            update_period,
            probe_epsilon,
            fitted: None,
            guard_trips: 0,
            probe_passes: 0,
        })
    }

    /// Starts from a known step size instead of the probe fallback.
    pub fn with_initial_eta(mut self, eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(arg_err(format!("initial eta must be positive, got {eta}")));
        }
        self.eta = eta;
        self.initialized = true;
        Ok(self)
    }

    pub fn is_update_step(&self, step: u64) -> bool {
        step % self.update_period == 0
    }
}

/// Loss samples at `θ − probe·d`, `θ`, `θ + probe·d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeLosses {
    pub l_minus: f64,
    pub l_zero: f64,
    pub l_plus: f64,
    pub probe: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeReport {
    /// `None` when every attempt produced a non-finite loss.
    pub losses: Option<ProbeLosses>,
    /// Forward passes actually spent, including retries.
    pub passes: u64,
}

/// Samples the loss on both sides of `params` along `direction`.
///
/// `params` is only read; the probes are evaluated on fresh copies. A
/// non-finite probe loss shrinks the probe tenfold, up to
/// [`MAX_PROBE_RETRIES`] times.
pub fn probe_losses<F>(
    mut loss: F,
    params: &ParameterVector,
    direction: &FlatGradient,
    probe: f64,
    l_zero: Option<f64>,
) -> Result<ProbeReport>
where
    F: FnMut(&ParameterVector) -> Result<f64>,
{
    if !(probe > 0.0 && probe.is_finite()) {
        return Err(arg_err(format!("probe magnitude must be positive, got {probe}")));
    }
    let mut passes = 0;
    let l_zero = match l_zero {
        Some(v) => v,
        None => {
            passes += 1;
            finite_or_none(loss(params))?.unwrap_or(f64::NAN)
        }
    };
    if !l_zero.is_finite() {
        return Ok(ProbeReport {
            losses: None,
            passes,
        });
    }
    let mut p = probe;
    for _ in 0..=MAX_PROBE_RETRIES {
        passes += 1;
        let minus = finite_or_none(loss(&axpy_update(params, direction, p)?))?;
        let plus = match minus {
            Some(_) => {
                passes += 1;
                finite_or_none(loss(&axpy_update(params, direction, -p)?))?
            }
            None => None,
        };
        if let (Some(l_minus), Some(l_plus)) = (minus, plus) {
            return Ok(ProbeReport {
                losses: Some(ProbeLosses {
                    l_minus,
                    l_zero,
                    l_plus,
                    probe: p,
                }),
                passes,
            });
        }
        p /= 10.0;
    }
    Ok(ProbeReport {
        losses: None,
        passes,
    })
}

fn finite_or_none(v: Result<f64>) -> Result<Option<f64>> {
    match v {
        Ok(x) if x.is_finite() => Ok(Some(x)),
        Ok(_) | Err(Error::NonFinite { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// `Q(x) = a2·x² + a1·x + a0` through the samples at signed step `x`, where
/// `x = −probe` is `l_minus`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    pub l_minus: f64,
    pub l_zero: f64,
    pub l_plus: f64,
    pub probe: f64,
    pub a2: f64,
    pub a1: f64,
    pub a0: f64,
}

impl QuadraticFit {
    pub fn eval(&self, x: f64) -> f64 {
        (self.a2 * x + self.a1) * x + self.a0
    }
}

pub fn fit_quadratic(probe: f64, l_minus: f64, l_zero: f64, l_plus: f64) -> Result<QuadraticFit> {
    if !(probe > 0.0) {
        return Err(arg_err(format!("probe magnitude must be positive, got {probe}")));
    }
    Ok(QuadraticFit {
        l_minus,
        l_zero,
        l_plus,
        probe,
        a1: (l_plus - l_minus) / (2.0 * probe),
        a2: (l_plus - 2.0 * l_zero + l_minus) / (2.0 * probe * probe),
        a0: l_zero,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardReason {
    /// `a2 <= CURVATURE_FLOOR`: no minimum along the direction.
    NonPositiveCurvature,
    /// The minimizer lies behind the current point.
    NonPositiveStep,
    /// Every probe attempt returned a non-finite loss.
    NonFiniteProbe,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrDecision {
    Step(f64),
    Guard(GuardReason),
}

/// Minimizer of `L(θ − η·d) ≈ a0 − a1·η + a2·η²`, i.e. `η* = a1 / (2·a2)`.
pub fn optimal_lr(fit: &QuadraticFit) -> LrDecision {
    if !(fit.a2 > CURVATURE_FLOOR) {
        return LrDecision::Guard(GuardReason::NonPositiveCurvature);
    }
    let eta = fit.a1 / (2.0 * fit.a2);
    if eta > 0.0 && eta.is_finite() {
        LrDecision::Step(eta)
    } else {
        LrDecision::Guard(GuardReason::NonPositiveStep)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateEvent {
    pub probed: bool,
    pub guard: Option<GuardReason>,
    pub passes: u64,
    pub fit: Option<QuadraticFit>,
}

/// Refits the step size on update steps (`step % update_period == 0`),
/// probing with the current `eta`. Off-period steps return the state
/// unchanged and cost nothing. On a guard trip the previous `eta` is kept.
///
/// `l_zero`, when known, is the loss at `params` and saves one pass.
pub fn maybe_update<F>(
    state: &LrState,
    step: u64,
    loss: F,
    params: &ParameterVector,
    direction: &FlatGradient,
    l_zero: Option<f64>,
) -> Result<(LrState, UpdateEvent)>
where
    F: FnMut(&ParameterVector) -> Result<f64>,
{
    if !state.is_update_step(step) {
        return Ok((state.clone(), UpdateEvent::default()));
    }
    let mut next = state.clone();
    let report = probe_losses(loss, params, direction, state.eta, l_zero)?;
    next.probe_passes += report.passes;
    next.last_update_step = Some(step);

    let mut event = UpdateEvent {
        probed: true,
        passes: report.passes,
        ..Default::default()
    };
    let decision = match report.losses {
        None => LrDecision::Guard(GuardReason::NonFiniteProbe),
        Some(p) => {
            let fit = fit_quadratic(p.probe, p.l_minus, p.l_zero, p.l_plus)?;
            next.fitted = Some(FittedCoefficients {
                first: fit.a1,
                second: fit.a2,
            });
            event.fit = Some(fit);
            optimal_lr(&fit)
        }
    };
    match decision {
        LrDecision::Step(eta) => {
            next.eta = eta;
            next.initialized = true;
        }
        LrDecision::Guard(reason) => {
            next.guard_trips += 1;
            event.guard = Some(reason);
        }
    }
    Ok((next, event))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_sq(p: &ParameterVector) -> Result<f64> {
        Ok(0.5 * p.data().iter().map(|v| v * v).sum::<f64>())
    }

    #[test]
    fn probe_scalar_quadratic() {
        let th = ParameterVector::from_vec(vec![3.0]);
        let d = FlatGradient::from_vec(vec![3.0]);
        let r = probe_losses(half_sq, &th, &d, 0.1, None).unwrap();
        let l = r.losses.unwrap();
        assert!((l.l_minus - 3.645).abs() < 1e-12);
        assert_eq!(l.l_zero, 4.5);
        assert!((l.l_plus - 5.445).abs() < 1e-12);
        assert_eq!(r.passes, 3);
        assert_eq!(th.data(), &[3.0]);
    }

    #[test]
    fn zero_direction_probes_are_flat() {
        let th = ParameterVector::from_vec(vec![3.0, -1.0]);
        let d = FlatGradient::from_vec(vec![0.0, 0.0]);
        let l = probe_losses(half_sq, &th, &d, 0.1, Some(5.0)).unwrap().losses.unwrap();
        assert_eq!(l.l_minus, l.l_plus);
        assert_eq!(l.l_minus, 5.0);
    }

    #[test]
    fn fit_through_three_points() {
        let f = fit_quadratic(0.1, 3.645, 4.5, 5.445).unwrap();
        assert!((f.a1 - 9.0).abs() < 1e-10);
        assert!((f.a2 - 4.5).abs() < 1e-10);
        assert_eq!(f.a0, 4.5);
        for (x, l) in [(-0.1, 3.645), (0.0, 4.5), (0.1, 5.445)] {
            assert!((f.eval(x) - l).abs() < 1e-12);
        }
        let sym = fit_quadratic(0.2, 1.0, 0.5, 1.0).unwrap();
        assert_eq!(sym.a1, 0.0);
        assert!(fit_quadratic(0.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn optimal_lr_cases() {
        let f = QuadraticFit {
            l_minus: 0.0,
            l_zero: 0.0,
            l_plus: 0.0,
            probe: 1.0,
            a2: 4.5,
            a1: 9.0,
            a0: 4.5,
        };
        assert_eq!(optimal_lr(&f), LrDecision::Step(1.0));
        let flat = QuadraticFit { a2: 0.0, ..f };
        assert_eq!(optimal_lr(&flat), LrDecision::Guard(GuardReason::NonPositiveCurvature));
        let concave = QuadraticFit { a2: -1.0, ..f };
        assert_eq!(optimal_lr(&concave), LrDecision::Guard(GuardReason::NonPositiveCurvature));
        let backwards = QuadraticFit { a1: -9.0, ..f };
        assert_eq!(optimal_lr(&backwards), LrDecision::Guard(GuardReason::NonPositiveStep));
    }

    #[test]
    fn off_period_step_is_free() {
        let s = LrState::default();
        let th = ParameterVector::from_vec(vec![3.0]);
        let d = FlatGradient::from_vec(vec![3.0]);
        let mut calls = 0;
        let (next, ev) = maybe_update(
            &s,
            3,
            |p| {
                calls += 1;
                half_sq(p)
            },
            &th,
            &d,
            None,
        )
        .unwrap();
        assert_eq!(next, s);
        assert!(!ev.probed);
        assert_eq!(calls, 0);
    }

    #[test]
    fn guard_on_quartic_hilltop() {
        // L = -θ⁴ near θ = 1 along d = 1 is concave.
        let quartic = |p: &ParameterVector| Ok(-p.data()[0].powi(4));
        let s = LrState::default().with_initial_eta(0.05).unwrap();
        let th = ParameterVector::from_vec(vec![1.0]);
        let d = FlatGradient::from_vec(vec![1.0]);
        let (next, ev) = maybe_update(&s, 0, quartic, &th, &d, None).unwrap();
        assert_eq!(next.eta, 0.05);
        assert_eq!(next.guard_trips, 1);
        assert_eq!(ev.guard, Some(GuardReason::NonPositiveCurvature));
    }

    #[test]
    fn non_finite_probe_shrinks_then_guards() {
        // Finite only inside |θ| < 1.
        let walled = |p: &ParameterVector| {
            let x = p.data()[0];
            Ok(if x.abs() < 1.0 { x * x } else { f64::INFINITY })
        };
        let th = ParameterVector::from_vec(vec![0.5]);
        let d = FlatGradient::from_vec(vec![1.0]);
        let r = probe_losses(walled, &th, &d, 1.0, None).unwrap();
        let l = r.losses.unwrap();
        assert!((l.probe - 0.1).abs() < 1e-15);
        assert_eq!(r.passes, 1 + 2 + 2);

        let never = |_: &ParameterVector| Ok(f64::NAN);
        let r = probe_losses(never, &th, &d, 1.0, Some(0.0)).unwrap();
        assert!(r.losses.is_none());
        assert_eq!(r.passes, 4);
        let s = LrState::default();
        let (next, ev) = maybe_update(&s, 0, never, &th, &d, Some(0.0)).unwrap();
        assert_eq!(ev.guard, Some(GuardReason::NonFiniteProbe));
        assert_eq!(next.eta, s.eta);
        assert_eq!(next.guard_trips, 1);
    }

    #[test]
    fn cubic_slope_error_shrinks_quadratically() {
        // L = θ³ at θ = 1, d = 1: true slope 3, fitted a1 = 3 + p².
        let cubic = |p: &ParameterVector| Ok(p.data()[0].powi(3));
        let th = ParameterVector::from_vec(vec![1.0]);
        let d = FlatGradient::from_vec(vec![1.0]);
        let mut prev = f64::INFINITY;
        for probe in [0.1, 0.05, 0.025, 0.0125] {
            let l = probe_losses(cubic, &th, &d, probe, None).unwrap().losses.unwrap();
            let f = fit_quadratic(probe, l.l_minus, l.l_zero, l.l_plus).unwrap();
            let err = (f.a1 - 3.0).abs();
            assert!((err - probe * probe).abs() < 1e-9, "probe {probe}: err {err}");
            assert!(err < prev);
            prev = err;
        }
    }

    #[test]
    fn state_validation() {
        assert!(LrState::new(0, 1e-3).is_err());
        assert!(LrState::new(10, 0.0).is_err());
        assert!(LrState::default().with_initial_eta(-1.0).is_err());
        let s = LrState::default();
        assert_eq!(s.update_period, 10);
        assert_eq!(s.eta, 1e-3);
    }
}
