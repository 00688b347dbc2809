//! The unlearning loop, fine-tuning, evaluation, Pareto tooling and cost
//! accounting.

mod config;
mod pareto;
mod problem;
mod record;
mod run;

pub use config::{
    FinetuneSpec, GaussianSpec, LrMode, MethodSpec, ProblemSpec, QuadPairSpec, RunConfig, Seeds,
};
pub use pareto::{non_dominated_indices, non_dominated_set, pareto_dominates, ParetoPoint};
pub use problem::{
    evaluate, BatchCycler, ClassifierObjective, EvalResult, QuadObjective, Task, TwoTaskObjective,
};
pub use record::{
    pass_overhead, FinalState, PassTotals, RunRecord, StepRow, BACKWARD_COST, BASELINE_STEP_COST,
    FORWARD_COST, PROBE_COST, RECORD_SCHEMA, TRACE_HEADER,
};
pub use run::{finetune, prepare, pretrain, run_prepared, run_tag, run_unlearning, Prepared, Pretrained};
