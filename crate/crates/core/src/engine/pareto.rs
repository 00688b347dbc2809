use serde::{Deserialize, Serialize};

/// Final `(L_R, L_F)` of a model. Lower retain loss and higher forget loss
/// are both better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub retain_loss: f64,
    pub forget_loss: f64,
    pub tag: String,
}

impl ParetoPoint {
    pub fn new(retain_loss: f64, forget_loss: f64, tag: impl Into<String>) -> Self {
        Self {
            retain_loss,
            forget_loss,
            tag: tag.into(),
        }
    }
}

/// Whether `q` dominates `p`: `q` is no worse on either task and strictly
/// better on at least one.
pub fn pareto_dominates(p: &ParetoPoint, q: &ParetoPoint) -> bool {
    dominates_raw(p.retain_loss, p.forget_loss, q.retain_loss, q.forget_loss)
}

pub(crate) fn dominates_raw(p_r: f64, p_f: f64, q_r: f64, q_f: f64) -> bool {
    q_r <= p_r && q_f >= p_f && (q_r < p_r || q_f > p_f)
}

/// Points not dominated by any other, in input order. O(n²).
pub fn non_dominated_set(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    non_dominated_indices(points)
        .into_iter()
        .map(|i| points[i].clone())
        .collect()
}

pub fn non_dominated_indices(points: &[ParetoPoint]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| !points.iter().any(|q| pareto_dominates(&points[i], q)))
        .collect()
}
