use serde::{Deserialize, Serialize};

use super::{CounterfactualProblem, YLoss};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::cross_entropy;

/// Relative size below which a feature offset is treated as zero.
pub const L1_DEADBAND: f64 = 1e-12;

/// Unweighted values of the objective's terms; `total` is the weighted sum.
/// Terms whose weight is zero are not evaluated and read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub yloss: f64,
    pub distance: f64,
    pub energy: f64,
    pub set_size: f64,
}

/// Objective value and gradient at one search point.
#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub components: LossComponents,
    /// `∇_z` of the total.
    pub grad: Vec<f64>,
    /// `f(z)`.
    pub x: Vec<f64>,
    /// `p(y⁺ | f(z))`.
    pub target_prob: f64,
}

fn yloss_term<'t>(problem: &CounterfactualProblem, logits: Var<'t>) -> Result<Var<'t>> {
    match problem.params.yloss {
        YLoss::CrossEntropy => cross_entropy(logits, &[problem.target]),
        YLoss::SetClassification => {
            // Σ_k (1 − C_k)·[k = y⁺] + C_k·[k ≠ y⁺] with threshold memberships.
            let cal = problem.calibrator.ok_or(Error::Missing("calibrator"))?;
            let members = cal.memberships_on(logits);
            let k = logits.shape()[1];
            let sign: Vec<f64> = (0..k).map(|c| if c == problem.target { -1.0 } else { 1.0 }).collect();
            let signed = members.mul(logits.tape().constant(Tensor::row_vector(sign)))?;
            Ok(signed.sum().add_scalar(1.0))
        }
    }
}

/// Build the objective for search point `z` on `tape`:
/// `yloss(μ(f(z)), y⁺) + λ₁‖f(z) − x‖₁ + λ₂·pen + λ₃·Ω(f(z))`, where `pen`
/// is `E + E²` (or `E` alone), or the mean Euclidean distance to the
/// reference samples when the problem carries them.
pub fn eccco_objective<'t>(
    problem: &CounterfactualProblem,
    tape: &'t Tape,
    z: Var<'t>,
) -> Result<(Var<'t>, Var<'t>, LossComponents, Var<'t>)> {
    let p = &problem.params;
    let x = problem.space.decode_on(tape, z)?;
    let logits = problem.model.logits_on(tape, x)?;
    let yloss = yloss_term(problem, logits)?;
    let mut comp = LossComponents {
        yloss: yloss.item(),
        ..LossComponents::default()
    };
    let mut total = yloss;
    if p.lambda1 != 0.0 {
        let factual = tape.constant(Tensor::row_vector(problem.factual.to_vec()));
        let diff = x.sub(factual)?;
        // Offsets at rounding level (e.g. from a latent round trip of the
        // factual) count as exactly zero, so they take the zero subgradient.
        let mask: Vec<f64> = diff
            .value()
            .data()
            .iter()
            .zip(problem.factual)
            .map(|(d, f)| if d.abs() <= L1_DEADBAND * f.abs().max(1.0) { 0.0 } else { 1.0 })
            .collect();
        let dist = diff.abs().mul(tape.constant(Tensor::row_vector(mask)))?.sum();
        comp.distance = dist.item();
        total = total.add(dist.scale(p.lambda1))?;
    }
    if p.lambda2 != 0.0 {
        let pen = match problem.samples {
            Some(samples) => tape
                .constant(samples.clone())
                .sub(x)?
                .square()
                .sum_rows()
                .sqrt()
                .mean(),
            None => {
                let e = logits.pick(&[problem.target])?.neg().sum();
                if p.squared_energy {
                    e.add(e.square())?
                } else {
                    e
                }
            }
        };
        comp.energy = pen.item();
        total = total.add(pen.scale(p.lambda2))?;
    }
    if p.lambda3 != 0.0 {
        let cal = problem.calibrator.ok_or(Error::Missing("calibrator"))?;
        let omega = cal.set_size_on(logits);
        comp.set_size = omega.item();
        total = total.add(omega.scale(p.lambda3))?;
    }
    comp.total = total.item();
    Ok((total, x, comp, logits))
}

/// Objective and `∇_z` at `z`.
pub fn eccco_loss(z: &[f64], problem: &CounterfactualProblem) -> Result<LossEval> {
    let tape = Tape::new();
    let zv = tape.var(Tensor::matrix(1, z.len(), z.to_vec())?);
    let (total, x, components, logits) = eccco_objective(problem, &tape, zv)?;
    let grad = tape.grad_wrt_input(total, zv)?.into_data();
    let lv = logits.value();
    let row = lv.row(0);
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z_sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
    Ok(LossEval {
        components,
        grad,
        x: x.value().into_data(),
        target_prob: (row[problem.target] - m).exp() / z_sum,
    })
}
