use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::autodiff::ParameterVector;
use crate::error::{arg_err, Result};

pub const RECORD_SCHEMA: u32 = 1;

pub const TRACE_HEADER: [&str; 11] = [
    "step",
    "loss_retain",
    "loss_forget",
    "acc_retain",
    "acc_forget",
    "lr",
    "coeff_c",
    "gnorm_retain",
    "gnorm_forget",
    "cos_rf",
    "guard",
];

/// Cost of one forward pass in forward-equivalent units.
pub const FORWARD_COST: u64 = 1;
/// A backward pass costs two forwards.
pub const BACKWARD_COST: u64 = 2;
/// Each step-size probe pass is charged two units, so one refit (two probe
/// passes) costs four: the `6 + 4/period` per-step accounting.
pub const PROBE_COST: u64 = 2;
/// One gradient-difference step: forward and backward on each task.
pub const BASELINE_STEP_COST: u64 = 2 * (FORWARD_COST + BACKWARD_COST);

/// One optimization step, measured at `θ_t` before the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    /// Minibatch retain loss (exact loss for analytic problems).
    pub loss_retain: f64,
    pub loss_forget: f64,
    pub acc_retain: Option<f64>,
    pub acc_forget: Option<f64>,
    /// Step size applied at this step.
    pub lr: f64,
    pub coeff_c: Option<f64>,
    pub gnorm_retain: Option<f64>,
    pub gnorm_forget: Option<f64>,
    pub cos_rf: Option<f64>,
    /// A step-size refit at this step tripped the curvature guard.
    pub guard: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassTotals {
    /// Forward passes with gradient tracking.
    pub forward_passes: u64,
    pub backward_passes: u64,
    /// Gradient-free forward passes spent on step-size probes.
    pub probe_passes: u64,
    pub guard_trips: u64,
    pub lr_updates: u64,
}

/// Metrics at the final parameters, after the last update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalState {
    pub loss_retain: f64,
    pub loss_forget: f64,
    pub acc_retain: Option<f64>,
    pub acc_forget: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: u32,
    pub tag: String,
    pub config: RunConfig,
    pub rows: Vec<StepRow>,
    pub totals: PassTotals,
    /// Metrics of the pre-unlearning starting point.
    pub initial: FinalState,
    #[serde(rename = "final")]
    pub final_state: FinalState,
    pub final_params: Vec<f64>,
    pub final_digest: String,
}

impl RunRecord {
    pub fn coefficients(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.coeff_c).collect()
    }

    pub fn final_param_vector(&self) -> ParameterVector {
        ParameterVector::from_vec(self.final_params.clone())
    }

    /// Re-checks the structural invariants of a (possibly re-parsed) record.
    pub fn validate(&self) -> Result<()> {
        if self.schema != RECORD_SCHEMA {
            return Err(arg_err(format!(
                "record schema {} (expected {RECORD_SCHEMA})",
                self.schema
            )));
        }
        self.config.validate()?;
        if self.rows.len() != self.config.steps {
            return Err(arg_err(format!(
                "record has {} rows for {} steps",
                self.rows.len(),
                self.config.steps
            )));
        }
        if let Some((i, _)) = self.rows.iter().enumerate().find(|(i, r)| r.step != *i) {
            return Err(arg_err(format!("row {i} is out of sequence")));
        }
        if self.final_param_vector().digest() != self.final_digest {
            return Err(arg_err("final parameter digest does not match"));
        }
        if !self.final_state.loss_retain.is_finite() || !self.final_state.loss_forget.is_finite() {
            return Err(arg_err("final losses are not finite"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json<R: Read>(input: R) -> Result<Self> {
        let r: RunRecord = serde_json::from_reader(input)?;
        r.validate()?;
        Ok(r)
    }

    /// Per-step trace with [`TRACE_HEADER`]; missing values are empty cells.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                format!("{:?}", r.loss_retain),
                format!("{:?}", r.loss_forget),
                opt(r.acc_retain),
                opt(r.acc_forget),
                format!("{:?}", r.lr),
                opt(r.coeff_c),
                opt(r.gnorm_retain),
                opt(r.gnorm_forget),
                opt(r.cos_rf),
                u8::from(r.guard).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `(observed cost, baseline cost)` in forward-equivalent units.
    pub fn pass_cost(&self) -> (u64, u64) {
        let t = &self.totals;
        let observed =
            t.forward_passes * FORWARD_COST + t.backward_passes * BACKWARD_COST + t.probe_passes * PROBE_COST;
        (observed, BASELINE_STEP_COST * self.rows.len() as u64)
    }
}

/// Cost of a run relative to plain gradient difference over the same steps,
/// with a backward pass counted as two forwards.
pub fn pass_overhead(record: &RunRecord) -> f64 {
    let (num, den) = record.pass_cost();
    num as f64 / den as f64
}
