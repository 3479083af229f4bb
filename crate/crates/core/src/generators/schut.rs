use std::time::Instant;

use super::{
    check_convergence, eccco_loss, norm, CounterfactualProblem, CounterfactualResult, GeneratorParams, SearchSpace,
    TraceStep,
};
use crate::error::{Error, Result};

/// Greedy saliency search in feature space: each step moves the single
/// unfrozen feature with the largest absolute cross-entropy gradient by
/// `−jsma_step · sign(g)`. Ties go to the lowest index. A feature moved
/// `jsma_max_per_feature` times is frozen; if every feature with a nonzero
/// gradient freezes first the best point seen so far is returned unconverged.
pub fn run_schut(problem: &CounterfactualProblem) -> Result<CounterfactualResult> {
    if !matches!(problem.space, SearchSpace::Feature) {
        return Err(Error::Config("the saliency search runs in feature space only".into()));
    }
    let params = GeneratorParams {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        ..problem.params.clone()
    };
    let problem = CounterfactualProblem {
        params: &params,
        samples: None,
        ..*problem
    };
    problem.validate()?;
    let started = Instant::now();
    let d = problem.factual.len();
    let mut x = problem.factual.to_vec();
    let mut moves = vec![0usize; d];
    let mut trace = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut converged = false;
    for t in 0..=params.t_max {
        let eval = eccco_loss(&x, &problem)?;
        if !eval.components.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: t,
                components: format!("yloss={}", eval.components.yloss),
            });
        }
        let grad_norm = norm(&eval.grad);
        trace.push(TraceStep {
            z: x.clone(),
            x: x.clone(),
            loss: eval.components,
            grad_norm,
        });
        if best.is_none_or(|(l, _)| eval.components.total < l) {
            best = Some((eval.components.total, t));
        }
        if check_convergence(grad_norm, eval.target_prob, params.convergence) || t == params.t_max {
            converged = check_convergence(grad_norm, eval.target_prob, params.convergence);
            break;
        }
        let mut pick: Option<usize> = None;
        for i in 0..d {
            if moves[i] >= params.jsma_max_per_feature || eval.grad[i] == 0.0 {
                continue;
            }
            if pick.is_none_or(|j| eval.grad[i].abs() > eval.grad[j].abs()) {
                pick = Some(i);
            }
        }
        let Some(i) = pick else { break };
        x[i] -= params.jsma_step * eval.grad[i].signum();
        moves[i] += 1;
    }
    let idx = if converged {
        trace.len() - 1
    } else {
        best.map_or(trace.len() - 1, |(_, t)| t)
    };
    let x = trace[idx].x.clone();
    Ok(CounterfactualResult {
        valid: problem.predicts_target(&x)?,
        z: x.clone(),
        x,
        iterations: trace.len() - 1,
        converged,
        trace,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}
