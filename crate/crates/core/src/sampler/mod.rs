//! Stochastic gradient Langevin dynamics for class-conditional sampling.
//!
//! An update is `x ← x − (φ/2) ∇ₓE(x|y) + σ r` with `r ~ N(0, I)`. Each chain
//! owns a random stream derived from `(seed, chain index)`, so a batch of
//! chains gives the same endpoints whatever order or grouping it runs in.

mod buffer;
mod energy;

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use buffer::SampleBuffer;
pub use energy::{ClassifierEnergy, EnergyModel, GaussianEnergy};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng};

/// Where chains start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SgldInit {
    /// Fresh `N(0, I)` draws.
    Random,
    /// Persistent buffer with occasional fresh draws.
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgldConfig {
    /// φ; the gradient step is φ/2.
    pub step_size: f64,
    /// σ
    pub noise_std: f64,
    /// J
    pub steps: usize,
    pub init: SgldInit,
    /// Per-dimension `(lo, hi)` box applied after every update.
    pub clamp: Option<Vec<(f64, f64)>>,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            step_size: 2.0,
            noise_std: 0.01,
            steps: 20,
            init: SgldInit::Buffer,
            clamp: None,
        }
    }
}

impl SgldConfig {
    /// Inference-time chains: 500 steps from random starts.
    pub fn inference() -> Self {
        Self {
            steps: 500,
            init: SgldInit::Random,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !(self.noise_std >= 0.0) || self.steps == 0 {
            return Err(Error::Config(format!(
                "sgld needs step_size > 0, noise_std >= 0 and steps >= 1 (got {}, {}, {})",
                self.step_size, self.noise_std, self.steps
            )));
        }
        if let Some(b) = &self.clamp {
            if b.iter().any(|(lo, hi)| !(lo <= hi)) {
                return Err(Error::Config("sgld clamp box has lo > hi".into()));
            }
        }
        Ok(())
    }

    /// Box `[min − margin, max + margin]` per dimension.
    pub fn with_clamp_around(mut self, bounds: &[(f64, f64)], margin: f64) -> Self {
        self.clamp = Some(bounds.iter().map(|&(lo, hi)| (lo - margin, hi + margin)).collect());
        self
    }
}

/// States `x₀..x_J` of one chain with their energies.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub energies: Vec<f64>,
}

impl Trajectory {
    /// CSV with columns `step, dim_0..dim_{D−1}, energy`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let d = self.states.first().map_or(0, Vec::len);
        let dims: Vec<String> = (0..d).map(|i| format!("dim_{i}")).collect();
        writeln!(out, "step,{},energy", dims.join(","))?;
        for (step, (s, e)) in self.states.iter().zip(&self.energies).enumerate() {
            let coords: Vec<String> = s.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{step},{},{e}", coords.join(","))?;
        }
        Ok(())
    }
}

fn clamp_row(row: &mut [f64], clamp: &Option<Vec<(f64, f64)>>) {
    if let Some(b) = clamp {
        for (v, &(lo, hi)) in row.iter_mut().zip(b) {
            *v = v.clamp(lo, hi);
        }
    }
}

fn update(x: &mut Tensor, grad: &Tensor, cfg: &SgldConfig, rngs: &mut [Rng], step: usize) -> Result<()> {
    let half = cfg.step_size / 2.0;
    let d = x.cols();
    for (i, rng) in rngs.iter_mut().enumerate() {
        let row = &mut x.data_mut()[i * d..(i + 1) * d];
        for (v, g) in row.iter_mut().zip(grad.row(i)) {
            let r: f64 = StandardNormal.sample(rng);
            *v = *v - half * g + cfg.noise_std * r;
        }
        clamp_row(row, &cfg.clamp);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIterate { step });
        }
    }
    Ok(())
}

fn check_start(x0: &Tensor, dim: usize) -> Result<()> {
    if x0.shape().len() != 2 || x0.cols() != dim {
        return Err(Error::Shape {
            op: "sgld start",
            lhs: x0.shape().to_vec(),
            rhs: vec![dim],
        });
    }
    if !x0.all_finite() {
        return Err(Error::NonFiniteIterate { step: 0 });
    }
    Ok(())
}

/// Run one chain per row of `x0` for `cfg.steps` steps and return the
/// endpoints. Row `i` uses `rngs[i]`.
pub fn sgld_run(
    model: &dyn EnergyModel,
    targets: &[usize],
    x0: &Tensor,
    cfg: &SgldConfig,
    rngs: &mut [Rng],
) -> Result<Tensor> {
    cfg.validate()?;
    check_start(x0, model.dim())?;
    debug_assert_eq!(rngs.len(), x0.rows());
    let mut x = x0.clone();
    for step in 1..=cfg.steps {
        let (_, grad) = model.energy_grad(&x, targets)?;
        update(&mut x, &grad, cfg, rngs, step)?;
    }
    Ok(x)
}

/// A single chain from `x₀`, keeping every state.
pub fn sgld_chain(model: &dyn EnergyModel, target: usize, x0: &[f64], cfg: &SgldConfig, seed: u64) -> Result<Trajectory> {
    cfg.validate()?;
    let mut x = Tensor::matrix(1, x0.len(), x0.to_vec())?;
    check_start(&x, model.dim())?;
    let mut rngs = [rng_from(seed, &[])];
    let mut states = Vec::with_capacity(cfg.steps + 1);
    let mut energies = Vec::with_capacity(cfg.steps + 1);
    for step in 1..=cfg.steps {
        let (e, grad) = model.energy_grad(&x, &[target])?;
        states.push(x.data().to_vec());
        energies.push(e[0]);
        update(&mut x, &grad, cfg, &mut rngs, step)?;
    }
    energies.push(model.energies(&x, &[target])?[0]);
    states.push(x.into_data());
    Ok(Trajectory { states, energies })
}

/// Draws of `N(0, I)` rows, one per stream.
pub(crate) fn standard_normal_rows(n: usize, d: usize, rngs: &mut [Rng]) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for rng in rngs.iter_mut().take(n) {
        for _ in 0..d {
            let v: f64 = StandardNormal.sample(rng);
            data.push(v);
        }
    }
    Tensor::matrix(n, d, data).expect("sized")
}

/// Lowest-energy endpoints of a batch of conditional chains.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalSamples {
    /// `n_keep × D`, sorted by ascending energy.
    pub samples: Tensor,
    pub energies: Vec<f64>,
    /// Energies of every endpoint in chain order.
    pub all_energies: Vec<f64>,
}

/// Run `n_batch` chains from fresh `N(0, I)` starts and keep the `n_keep`
/// endpoints of lowest energy. Ties are broken by chain index.
pub fn generate_conditional(
    model: &dyn EnergyModel,
    target: usize,
    n_batch: usize,
    n_keep: usize,
    cfg: &SgldConfig,
    seed: u64,
) -> Result<ConditionalSamples> {
    if n_keep > n_batch || n_keep == 0 {
        return Err(Error::Config(format!(
            "n_keep must be in 1..={n_batch}, got {n_keep}"
        )));
    }
    let d = model.dim();
    let mut rngs: Vec<Rng> = (0..n_batch as u64).map(|c| rng_from(seed, &[c])).collect();
    let mut x0 = standard_normal_rows(n_batch, d, &mut rngs);
    for i in 0..n_batch {
        clamp_row(&mut x0.data_mut()[i * d..(i + 1) * d], &cfg.clamp);
    }
    let targets = vec![target; n_batch];
    let end = sgld_run(model, &targets, &x0, cfg, &mut rngs)?;
    let all_energies = model.energies(&end, &targets)?;
    let mut order: Vec<usize> = (0..n_batch).collect();
    order.sort_by(|&a, &b| all_energies[a].total_cmp(&all_energies[b]).then(a.cmp(&b)));
    order.truncate(n_keep);
    Ok(ConditionalSamples {
        samples: end.select_rows(&order),
        energies: order.iter().map(|&i| all_energies[i]).collect(),
        all_energies,
    })
}
