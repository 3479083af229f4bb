//! Gradient-based counterfactual search.
//!
//! All generators share one loop: start from `z₀ = f⁻¹(x)`, take plain
//! gradient steps of size `η` on the objective in [`eccco_loss`], and stop on
//! convergence or after `T_max` steps. The generators differ only in their
//! penalty weights and search space, except Schut, which replaces the
//! gradient step with a greedy one-feature move.

mod loss;
mod schut;
mod space;

use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use loss::{eccco_loss, eccco_objective, LossComponents, LossEval};
pub use schut::run_schut;
pub use space::{Pca, SearchSpace};

use crate::autodiff::Tensor;
use crate::conformal::ConformalCalibrator;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::sampler::{generate_conditional, ClassifierEnergy, SgldConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Wachter,
    Schut,
    Revise,
    Eccco,
    EcccoPlus,
    EcccoL1,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 6] = [
        Self::Eccco,
        Self::EcccoPlus,
        Self::EcccoL1,
        Self::Revise,
        Self::Schut,
        Self::Wachter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Wachter => "wachter",
            Self::Schut => "schut",
            Self::Revise => "revise",
            Self::Eccco => "eccco",
            Self::EcccoPlus => "eccco_plus",
            Self::EcccoL1 => "eccco_l1",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Wachter => "Wachter",
            Self::Schut => "Schut",
            Self::Revise => "REVISE",
            Self::Eccco => "ECCCo",
            Self::EcccoPlus => "ECCCo+",
            Self::EcccoL1 => "ECCCo-L1",
        }
    }

    /// Default parameters with the penalties this generator does not use
    /// switched off.
    pub fn default_params(self) -> GeneratorParams {
        let base = GeneratorParams::default();
        match self {
            Self::Wachter | Self::Revise | Self::Schut => GeneratorParams {
                lambda2: 0.0,
                lambda3: 0.0,
                ..base
            },
            Self::Eccco | Self::EcccoPlus | Self::EcccoL1 => base,
        }
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                what: "generator",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Convergence {
    /// `‖∇z‖₂ ≤ tol`.
    GradientNorm { tol: f64 },
    /// `p(y⁺ | x′) > gamma`.
    ThresholdProb { gamma: f64 },
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence::GradientNorm { tol: 1e-2 }
    }
}

/// Which classification loss drives the search toward the target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YLoss {
    #[default]
    CrossEntropy,
    /// Penalize the target's absence from and other labels' presence in the
    /// smooth prediction set; needs a calibrator.
    SetClassification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorParams {
    /// Weight of the L1 distance to the factual.
    pub lambda1: f64,
    /// Weight of the energy (or sample-distance) penalty.
    pub lambda2: f64,
    /// Weight of the smooth set-size penalty.
    pub lambda3: f64,
    pub eta: f64,
    pub t_max: usize,
    pub convergence: Convergence,
    /// Use `E + E²` rather than `E` for the energy penalty.
    pub squared_energy: bool,
    pub yloss: YLoss,
    pub jsma_step: f64,
    pub jsma_max_per_feature: usize,
    /// Latent size for the PCA search space; `None` keeps every component.
    pub pca_dims: Option<usize>,
    /// Chains and kept samples for the reference set of ECCCo-L1.
    pub l1_n_batch: usize,
    pub l1_n_keep: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.1,
            eta: 0.05,
            t_max: 500,
            convergence: Convergence::default(),
            squared_energy: true,
            yloss: YLoss::CrossEntropy,
            jsma_step: 0.1,
            jsma_max_per_feature: 50,
            pca_dims: None,
            l1_n_batch: 50,
            l1_n_keep: 25,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda1, self.lambda2, self.lambda3].iter().all(|l| *l >= 0.0)
            && self.eta > 0.0
            && self.t_max >= 1
            && self.jsma_step > 0.0
            && self.l1_n_keep >= 1
            && self.l1_n_keep <= self.l1_n_batch;
        if !ok {
            return Err(Error::Config(format!("invalid generator parameters {self:?}")));
        }
        Ok(())
    }
}

/// One counterfactual search.
#[derive(Clone, Copy)]
pub struct CounterfactualProblem<'a> {
    pub factual: &'a [f64],
    pub target: usize,
    pub model: &'a dyn Classifier,
    pub calibrator: Option<&'a ConformalCalibrator>,
    pub params: &'a GeneratorParams,
    pub space: SearchSpace<'a>,
    /// Reference samples; when set, the λ₂ term is the mean distance to them.
    pub samples: Option<&'a Tensor>,
}

impl<'a> CounterfactualProblem<'a> {
    pub fn new(
        factual: &'a [f64],
        target: usize,
        model: &'a dyn Classifier,
        params: &'a GeneratorParams,
    ) -> Self {
        Self {
            factual,
            target,
            model,
            calibrator: None,
            params,
            space: SearchSpace::Feature,
            samples: None,
        }
    }

    pub fn with_calibrator(mut self, cal: &'a ConformalCalibrator) -> Self {
        self.calibrator = Some(cal);
        self
    }

    pub fn with_space(mut self, space: SearchSpace<'a>) -> Self {
        self.space = space;
        self
    }

    pub fn with_samples(mut self, samples: &'a Tensor) -> Self {
        self.samples = Some(samples);
        self
    }

    /// Checks shared by every generator, including that the model does not
    /// already predict the target at the factual.
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let d = self.model.input_dim();
        if self.factual.len() != d {
            return Err(Error::Shape {
                op: "counterfactual factual",
                lhs: vec![self.factual.len()],
                rhs: vec![d],
            });
        }
        if self.target >= self.model.n_classes() {
            return Err(Error::Index {
                what: "target class",
                index: self.target,
                size: self.model.n_classes(),
            });
        }
        if self.params.lambda3 > 0.0 && self.calibrator.is_none() {
            return Err(Error::Missing("calibrator"));
        }
        if let Some(s) = self.samples {
            if s.rows() == 0 || s.cols() != d {
                return Err(Error::EmptyReference("sample penalty"));
            }
        }
        let pred = self.model.predict_label(&Tensor::matrix(1, d, self.factual.to_vec())?)?;
        if pred[0] == self.target {
            return Err(Error::AlreadyTarget(self.target));
        }
        Ok(())
    }

    fn predicts_target(&self, x: &[f64]) -> Result<bool> {
        Ok(self.model.predict_label(&Tensor::matrix(1, x.len(), x.to_vec())?)?[0] == self.target)
    }
}

/// State recorded at every visited search point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    pub loss: LossComponents,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    /// `predict_label(x) == target`, evaluated after the search.
    pub valid: bool,
    pub iterations: usize,
    pub converged: bool,
    /// `iterations + 1` entries: the start and every step taken.
    pub trace: Vec<TraceStep>,
    pub wall_time_secs: f64,
}

impl CounterfactualResult {
    /// CSV with `step, z_*, x_*, total, yloss, distance, energy, set_size, grad_norm`.
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let nz = self.trace.first().map_or(0, |s| s.z.len());
        let nx = self.trace.first().map_or(0, |s| s.x.len());
        let mut header = vec!["step".to_string()];
        header.extend((0..nz).map(|i| format!("z_{i}")));
        header.extend((0..nx).map(|i| format!("x_{i}")));
        header.extend(["total", "yloss", "distance", "energy", "set_size", "grad_norm"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        for (t, s) in self.trace.iter().enumerate() {
            let mut cells = vec![t.to_string()];
            cells.extend(s.z.iter().map(|v| v.to_string()));
            cells.extend(s.x.iter().map(|v| v.to_string()));
            let l = &s.loss;
            cells.extend([l.total, l.yloss, l.distance, l.energy, l.set_size, s.grad_norm].map(|v| v.to_string()));
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Whether the latest recorded step satisfies the stopping rule.
pub fn check_convergence(grad_norm: f64, target_prob: f64, mode: Convergence) -> bool {
    match mode {
        Convergence::GradientNorm { tol } => grad_norm <= tol,
        Convergence::ThresholdProb { gamma } => target_prob > gamma,
    }
}

/// The shared descent loop.
pub fn run_gradient(problem: &CounterfactualProblem) -> Result<CounterfactualResult> {
    problem.validate()?;
    let started = Instant::now();
    let p = problem.params;
    let mut z = problem.space.encode(problem.factual)?;
    let mut trace: Vec<TraceStep> = Vec::with_capacity(p.t_max.min(4096) + 1);
    let mut best: Option<(f64, usize)> = None;
    let mut converged = false;
    for t in 0..=p.t_max {
        let eval = eccco_loss(&z, problem)?;
        let c = eval.components;
        if !c.total.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: t,
                components: format!(
                    "total={} yloss={} distance={} energy={} set_size={}",
                    c.total, c.yloss, c.distance, c.energy, c.set_size
                ),
            });
        }
        let grad_norm = norm(&eval.grad);
        trace.push(TraceStep {
            z: z.clone(),
            x: eval.x.clone(),
            loss: c,
            grad_norm,
        });
        if best.is_none_or(|(l, _)| c.total < l) {
            best = Some((c.total, t));
        }
        if check_convergence(grad_norm, eval.target_prob, p.convergence) {
            converged = true;
            break;
        }
        if t == p.t_max {
            break;
        }
        for (zi, g) in z.iter_mut().zip(&eval.grad) {
            *zi -= p.eta * g;
        }
    }
    let pick = if converged {
        trace.len() - 1
    } else {
        best.map_or(trace.len() - 1, |(_, t)| t)
    };
    let (x, z) = (trace[pick].x.clone(), trace[pick].z.clone());
    Ok(CounterfactualResult {
        valid: problem.predicts_target(&x)?,
        x,
        z,
        iterations: trace.len() - 1,
        converged,
        trace,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// ECCCo: feature-space search with energy and set-size penalties.
pub fn run_eccco(problem: &CounterfactualProblem) -> Result<CounterfactualResult> {
    run_gradient(&CounterfactualProblem {
        space: SearchSpace::Feature,
        samples: None,
        ..*problem
    })
}

/// ECCCo+: the same objective searched over PCA coordinates.
pub fn run_eccco_plus(problem: &CounterfactualProblem, pca: &Pca) -> Result<CounterfactualResult> {
    run_gradient(&CounterfactualProblem {
        space: SearchSpace::Pca(pca),
        samples: None,
        ..*problem
    })
}

/// ECCCo-L1: the energy penalty is replaced by the mean distance to the
/// `n_keep` lowest-energy conditional samples, drawn once up front unless
/// the problem already carries them.
pub fn run_eccco_l1(problem: &CounterfactualProblem, sgld: &SgldConfig, seed: u64) -> Result<CounterfactualResult> {
    let generated;
    let samples = match problem.samples {
        Some(s) => s,
        None => {
            problem.validate()?;
            let p = problem.params;
            generated = generate_conditional(
                &ClassifierEnergy(problem.model),
                problem.target,
                p.l1_n_batch,
                p.l1_n_keep,
                sgld,
                seed,
            )?
            .samples;
            &generated
        }
    };
    run_gradient(&CounterfactualProblem {
        space: SearchSpace::Feature,
        samples: Some(samples),
        ..*problem
    })
}

/// Wachter: cross-entropy plus the distance penalty only.
pub fn run_wachter(problem: &CounterfactualProblem) -> Result<CounterfactualResult> {
    let params = GeneratorParams {
        lambda2: 0.0,
        lambda3: 0.0,
        ..problem.params.clone()
    };
    run_gradient(&CounterfactualProblem {
        params: &params,
        space: SearchSpace::Feature,
        samples: None,
        ..*problem
    })
}

/// REVISE: Wachter's objective searched through a VAE decoder.
pub fn run_revise(problem: &CounterfactualProblem, vae: &crate::models::Vae) -> Result<CounterfactualResult> {
    let params = GeneratorParams {
        lambda2: 0.0,
        lambda3: 0.0,
        ..problem.params.clone()
    };
    run_gradient(&CounterfactualProblem {
        params: &params,
        space: SearchSpace::Vae(vae),
        samples: None,
        ..*problem
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Mlp;

    /// Two-class linear model with logits `(−x₀, x₀)`.
    fn linear() -> Mlp {
        let mut m = Mlp::zeros(&[2, 2]).unwrap();
        m.layers[0].weight = Tensor::matrix(2, 2, vec![-1.0, 1.0, 0.0, 0.0]).unwrap();
        m
    }

    #[test]
    fn kind_names_round_trip() {
        for k in GeneratorKind::ALL {
            assert_eq!(k.name().parse::<GeneratorKind>().unwrap(), k);
        }
        assert!("dice".parse::<GeneratorKind>().is_err());
    }

    #[test]
    fn trace_length_is_iterations_plus_one() {
        let m = linear();
        let params = GeneratorParams {
            lambda2: 0.0,
            lambda3: 0.0,
            t_max: 40,
            ..GeneratorParams::default()
        };
        let x = [-1.0, 0.3];
        let res = run_wachter(&CounterfactualProblem::new(&x, 1, &m, &params)).unwrap();
        assert_eq!(res.trace.len(), res.iterations + 1);
        assert!(res.iterations <= 40);
        assert_eq!(res.trace[0].x, x.to_vec());
    }

    #[test]
    fn precondition_rejects_predicted_target() {
        let m = linear();
        let params = GeneratorKind::Wachter.default_params();
        let x = [1.0, 0.0];
        assert!(matches!(
            run_wachter(&CounterfactualProblem::new(&x, 1, &m, &params)),
            Err(Error::AlreadyTarget(1))
        ));
    }

    #[test]
    fn one_step_with_huge_tolerance_stays_at_factual() {
        let m = linear();
        let params = GeneratorParams {
            convergence: Convergence::GradientNorm { tol: 1e9 },
            ..GeneratorKind::Wachter.default_params()
        };
        let x = [-1.0, 0.3];
        let res = run_wachter(&CounterfactualProblem::new(&x, 1, &m, &params)).unwrap();
        assert_eq!(res.x, x.to_vec());
        assert!(!res.valid);
        assert!(res.converged);
    }

    #[test]
    fn convergence_checks() {
        assert!(check_convergence(0.0, 0.0, Convergence::GradientNorm { tol: 1e-2 }));
        assert!(check_convergence(5.0, 0.51, Convergence::ThresholdProb { gamma: 0.5 }));
        assert!(!check_convergence(5.0, 0.5, Convergence::ThresholdProb { gamma: 0.5 }));
    }

    #[test]
    fn energy_penalty_needs_no_calibrator_but_set_size_does() {
        let m = linear();
        let params = GeneratorParams::default();
        let x = [-1.0, 0.3];
        assert!(matches!(
            run_eccco(&CounterfactualProblem::new(&x, 1, &m, &params)),
            Err(Error::Missing("calibrator"))
        ));
    }

    #[test]
    fn trace_csv_header() {
        let m = linear();
        let params = GeneratorParams {
            t_max: 3,
            ..GeneratorKind::Wachter.default_params()
        };
        let x = [-1.0, 0.3];
        let res = run_wachter(&CounterfactualProblem::new(&x, 1, &m, &params)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        res.write_trace_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("step,z_0,z_1,x_0,x_1,total,yloss,distance,energy,set_size,grad_norm\n"));
        assert_eq!(text.lines().count(), res.trace.len() + 1);
    }
}
