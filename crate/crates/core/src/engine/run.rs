use crate::autodiff::{axpy_update, FlatGradient, Graph, ParameterVector};
use crate::bench::{mlp_factory, ForgetRetainSplit, LabeledBatch};
use crate::combiners::{combine, CombinerOutput};
use crate::error::{Error, Result};
use crate::objectives::LossPair;
use crate::scheduler::maybe_update;

use super::config::{GaussianSpec, LrMode, MethodSpec, ProblemSpec, RunConfig, Seeds};
use super::problem::{ClassifierObjective, QuadObjective, Task, TwoTaskObjective};
use super::record::{FinalState, PassTotals, RunRecord, StepRow, RECORD_SCHEMA};

/// Plain full-batch gradient descent on the pooled data.
pub fn finetune(
    model: &mut Graph,
    params: &ParameterVector,
    full_data: &LabeledBatch,
    steps: usize,
    eta: f64,
) -> Result<ParameterVector> {
    let mut p = params.clone();
    for step in 0..steps {
        let diverged = |reason: String, last: &ParameterVector| Error::Diverged {
            step,
            reason,
            last_params: last.data().to_vec(),
        };
        let loss = match model.forward(&p, full_data) {
            Ok(l) if l.is_finite() => l,
            Ok(l) => return Err(diverged(format!("fine-tune loss {l}"), &p)),
            Err(e @ Error::NonFinite { .. }) => return Err(diverged(e.to_string(), &p)),
            Err(e) => return Err(e),
        };
        let _ = loss;
        let g = model.backward()?;
        let next = axpy_update(&p, &g, eta)?;
        if next.data().iter().any(|v| !v.is_finite()) {
            return Err(diverged("non-finite parameters".into(), &p));
        }
        p = next;
    }
    Ok(p)
}

/// The "No-unlearn" model: data, architecture, and the fine-tuned snapshot.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub graph: Graph,
    pub split: ForgetRetainSplit,
    pub snapshot: ParameterVector,
}

/// Generates the task from `seeds.data`, initializes from `seeds.init`, and
/// fine-tunes on retain ∪ forget.
pub fn pretrain(spec: &GaussianSpec, seeds: &Seeds) -> Result<Pretrained> {
    let split = spec.task.generate(seeds.data)?;
    let (mut graph, init) = mlp_factory(seeds.init, &spec.task.widths())?;
    let pooled = split.pooled()?;
    let snapshot = finetune(&mut graph, &init, &pooled, spec.finetune.steps, spec.finetune.eta)?;
    Ok(Pretrained {
        graph,
        split,
        snapshot,
    })
}

/// A problem ready to unlearn from.
#[derive(Clone)]
pub enum Prepared {
    Quad {
        objective: QuadObjective,
        start: ParameterVector,
    },
    Classifier {
        objective: Box<ClassifierObjective>,
        start: ParameterVector,
    },
}

/// Builds the objective and starting point for `cfg`. Classification
/// problems are fine-tuned here unless `pretrained` is supplied.
pub fn prepare(cfg: &RunConfig, pretrained: Option<&Pretrained>) -> Result<Prepared> {
    match &cfg.problem {
        ProblemSpec::QuadPair(q) => {
            let objective = QuadObjective::new(q.problem())?;
            let start = objective.params(q.start())?;
            Ok(Prepared::Quad { objective, start })
        }
        ProblemSpec::Gaussian(g) => {
            let owned;
            let pre = match pretrained {
                Some(p) => p,
                None => {
                    owned = pretrain(g, &cfg.seeds)?;
                    &owned
                }
            };
            let objective = ClassifierObjective::new(
                pre.graph.clone(),
                pre.split.clone(),
                pre.snapshot.clone(),
                cfg.batch_size,
                cfg.seeds.method,
            )?;
            Ok(Prepared::Classifier {
                objective: Box::new(objective),
                start: pre.snapshot.clone(),
            })
        }
    }
}

pub fn run_tag(cfg: &RunConfig) -> String {
    let s = &cfg.seeds;
    format!("{}_{}-{}-{}", cfg.method.name(), s.data, s.init, s.method)
}

/// Runs the configured unlearning loop from scratch (including fine-tuning).
pub fn run_unlearning(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    run_prepared(cfg, prepare(cfg, None)?)
}

/// Runs the loop on an already prepared problem.
///
/// Each step: forward/backward on the retain minibatch (`g_R`), then on the
/// forget minibatch (`g_F`), combine, refit the step size on update steps
/// when in auto mode (probing the same retain minibatch), and apply
/// `θ ← θ − η·g_UN`. NPO replaces the two passes and the combine with one
/// forward/backward of its own loss.
pub fn run_prepared(cfg: &RunConfig, prepared: Prepared) -> Result<RunRecord> {
    cfg.validate()?;
    let (mut quad, mut clf, start) = match prepared {
        Prepared::Quad { objective, start } => (Some(objective), None, start),
        Prepared::Classifier { objective, start } => (None, Some(objective), start),
    };
    let obj: &mut dyn TwoTaskObjective = match (&mut quad, &mut clf) {
        (Some(q), _) => q,
        (_, Some(c)) => c.as_mut(),
        _ => unreachable!(),
    };
    if obj.layout().as_ref() != start.layout().as_ref() {
        return Err(crate::error::dim_err("start parameters do not match the problem layout"));
    }

    let initial = final_state(obj, &start)?;
    let combiner = cfg.method.combiner(cfg.seeds.method);
    let mut lr_state = cfg.lr.initial_state()?;
    let mut totals = PassTotals::default();
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut params = start;

    for t in 0..cfg.steps {
        let abort = |reason: String, p: &ParameterVector| Error::Diverged {
            step: t,
            reason,
            last_params: p.data().to_vec(),
        };
        let nonfinite = |e: Error, p: &ParameterVector| match e {
            Error::NonFinite { .. } => abort(e.to_string(), p),
            other => other,
        };

        obj.begin_step()?;
        let eval = if t % cfg.eval_every == 0 {
            obj.evaluate(&params)?
        } else {
            None
        };

        let (direction, loss_retain, loss_forget, combined): (
            FlatGradient,
            f64,
            f64,
            Option<(CombinerOutput, f64)>,
        ) = match &combiner {
                Some(spec) => {
                    let (lr, gr) = obj.loss_grad(Task::Retain, &params).map_err(|e| nonfinite(e, &params))?;
                    let (lf, gf) = obj.loss_grad(Task::Forget, &params).map_err(|e| nonfinite(e, &params))?;
                    totals.forward_passes += 2;
                    totals.backward_passes += 2;
                    if !lr.is_finite() || !lf.is_finite() || !gr.is_finite() || !gf.is_finite() {
                        return Err(abort(format!("non-finite loss or gradient (L_R={lr}, L_F={lf})"), &params));
                    }
                    let (nr, nf) = obj.batch_counts();
                    let out = combine(spec, &gr, &gf, &LossPair::new(lr, lf, nr, nf)?, t as u64)?;
                    let cos = out.cos_retain_forget(&gr, &gf);
                    (out.direction.clone(), lr, lf, Some((out, cos)))
                }
                None => {
                    let MethodSpec::Npo { beta } = cfg.method else {
                        unreachable!("only NPO lacks a combiner")
                    };
                    let (_, g) = obj.npo_loss_grad(&params, beta).map_err(|e| nonfinite(e, &params))?;
                    totals.forward_passes += 1;
                    totals.backward_passes += 1;
                    if !g.is_finite() {
                        return Err(abort("non-finite NPO gradient".into(), &params));
                    }
                    let lr = obj.loss(Task::Retain, &params).map_err(|e| nonfinite(e, &params))?;
                    let lf = obj.loss(Task::Forget, &params).map_err(|e| nonfinite(e, &params))?;
                    (g, lr, lf, None)
                }
            };

        let (eta, guard) = match (&cfg.lr, lr_state.as_mut()) {
            (LrMode::Fixed { eta }, _) => (*eta, false),
            (LrMode::Auto { .. }, Some(state)) => {
                let l_zero = combined.as_ref().map(|_| loss_retain);
                let (next, ev) = maybe_update(
                    state,
                    t as u64,
                    |p| obj.loss(Task::Retain, p),
                    &params,
                    &direction,
                    l_zero,
                )?;
                *state = next;
                totals.probe_passes += ev.passes;
                totals.lr_updates += u64::from(ev.probed);
                totals.guard_trips += u64::from(ev.guard.is_some());
                (state.eta, ev.guard.is_some())
            }
            (LrMode::Auto { .. }, None) => unreachable!("auto mode always has a state"),
        };

        rows.push(StepRow {
            step: t,
            loss_retain,
            loss_forget,
            acc_retain: eval.map(|e| e.acc_retain),
            acc_forget: eval.map(|e| e.acc_forget),
            lr: eta,
            coeff_c: combined.as_ref().map(|(o, _)| o.coefficient),
            gnorm_retain: combined.as_ref().map(|(o, _)| o.norm_retain),
            gnorm_forget: combined.as_ref().map(|(o, _)| o.norm_forget),
            cos_rf: combined.as_ref().map(|(_, cos)| *cos),
            guard,
        });

        let next = axpy_update(&params, &direction, eta)?;
        if next.data().iter().any(|v| !v.is_finite()) {
            return Err(abort("non-finite parameters after update".into(), &params));
        }
        params = next;
    }

    let final_state = final_state(obj, &params)?;
    if !final_state.loss_retain.is_finite() || !final_state.loss_forget.is_finite() {
        return Err(Error::Diverged {
            step: cfg.steps,
            reason: "non-finite final loss".into(),
            last_params: params.data().to_vec(),
        });
    }
    Ok(RunRecord {
        schema: RECORD_SCHEMA,
        tag: run_tag(cfg),
        config: cfg.clone(),
        rows,
        totals,
        initial,
        final_state,
        final_digest: params.digest(),
        final_params: params.data().to_vec(),
    })
}

fn final_state(obj: &dyn TwoTaskObjective, params: &ParameterVector) -> Result<FinalState> {
    let (loss_retain, loss_forget) = obj.full_losses(params)?;
    let eval = obj.evaluate(params)?;
    Ok(FinalState {
        loss_retain,
        loss_forget,
        acc_retain: eval.map(|e| e.acc_retain),
        acc_forget: eval.map(|e| e.acc_forget),
    })
}
