//! Split conformal prediction and its smooth set-size surrogate.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::Classifier;

/// What the smooth membership compares a score against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    /// `σ((s − α)/T)`.
    #[default]
    Alpha,
    /// `σ((q̂ − s)/T)`: close to 1 for labels inside the prediction set.
    Quantile,
}

/// Calibrated split-conformal predictor for a fixed model.
///
/// `q_hat` is `+∞` when the calibration set is too small for the requested
/// error rate; prediction sets are then always full.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibrator {
    /// Sorted calibration scores; not persisted.
    #[serde(skip)]
    pub scores: Vec<f64>,
    #[serde(serialize_with = "ser_inf", deserialize_with = "de_inf")]
    pub q_hat: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub kappa: f64,
    #[serde(default)]
    pub threshold: Threshold,
}

fn ser_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_some(v)
    } else {
        s.serialize_none()
    }
}

fn de_inf<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

/// `1 − p_y` for every row, computed as the sum of the other probabilities so
/// that confident predictions keep their small scores.
pub fn scores(model: &dyn Classifier, x: &Tensor, y: &[usize]) -> Result<Vec<f64>> {
    let p = model.predict_proba(x)?;
    Ok(y.iter()
        .enumerate()
        .map(|(i, &c)| score_from_proba(p.row(i), c))
        .collect())
}

pub fn score_from_proba(p: &[f64], y: usize) -> f64 {
    p.iter()
        .enumerate()
        .filter(|&(k, _)| k != y)
        .map(|(_, v)| v)
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

pub fn score(model: &dyn Classifier, x: &[f64], y: usize) -> Result<f64> {
    Ok(scores(model, &Tensor::matrix(1, x.len(), x.to_vec())?, &[y])?[0])
}

/// The `⌈(n+1)(1−α)⌉`-th smallest of `sorted`, or `+∞` if that rank exceeds `n`.
pub fn conformal_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let n = sorted.len();
    let rank = ((n as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil() as usize;
    if rank == 0 {
        sorted.first().copied().unwrap_or(f64::INFINITY)
    } else if rank > n {
        f64::INFINITY
    } else {
        sorted[rank - 1]
    }
}

impl ConformalCalibrator {
    pub const DEFAULT_TEMPERATURE: f64 = 0.1;
    pub const DEFAULT_KAPPA: f64 = 1.0;

    pub fn from_scores(mut scores: Vec<f64>, alpha: f64) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1), got {alpha}")));
        }
        scores.sort_by(f64::total_cmp);
        let q_hat = conformal_quantile(&scores, alpha);
        Ok(Self {
            scores,
            q_hat,
            alpha,
            temperature: Self::DEFAULT_TEMPERATURE,
            kappa: Self::DEFAULT_KAPPA,
            threshold: Threshold::Alpha,
        })
    }

    /// Score the calibration rows and take the conformal quantile.
    pub fn calibrate(model: &dyn Classifier, x_cal: &Tensor, y_cal: &[usize], alpha: f64) -> Result<Self> {
        if y_cal.is_empty() {
            return Err(Error::EmptyCalibration);
        }
        Self::from_scores(scores(model, x_cal, y_cal)?, alpha)
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn with_threshold(mut self, threshold: Threshold) -> Self {
        self.threshold = threshold;
        self
    }

    /// Labels whose score is at most `q̂`.
    pub fn prediction_set(&self, model: &dyn Classifier, x: &[f64]) -> Result<Vec<usize>> {
        let p = model.predict_proba(&Tensor::matrix(1, x.len(), x.to_vec())?)?;
        Ok(self.set_from_proba(p.row(0)))
    }

    pub fn set_from_proba(&self, p: &[f64]) -> Vec<usize> {
        (0..p.len()).filter(|&k| score_from_proba(p, k) <= self.q_hat).collect()
    }

    /// Share of rows whose label falls inside its prediction set.
    pub fn coverage(&self, model: &dyn Classifier, x: &Tensor, y: &[usize]) -> Result<f64> {
        let s = scores(model, x, y)?;
        Ok(s.iter().filter(|&&v| v <= self.q_hat).count() as f64 / y.len().max(1) as f64)
    }

    fn membership_value(&self, s: f64) -> f64 {
        match self.threshold {
            Threshold::Alpha => sigmoid((s - self.alpha) / self.temperature),
            Threshold::Quantile => sigmoid((self.q_hat - s) / self.temperature),
        }
    }

    pub fn smooth_membership(&self, model: &dyn Classifier, x: &[f64], y: usize) -> Result<f64> {
        Ok(self.membership_value(score(model, x, y)?))
    }

    /// `max(0, Σ_y membership(x, y) − κ)`.
    pub fn set_size_penalty(&self, model: &dyn Classifier, x: &[f64]) -> Result<f64> {
        let p = model.predict_proba(&Tensor::matrix(1, x.len(), x.to_vec())?)?;
        Ok(self.penalty_from_proba(p.row(0)))
    }

    pub fn penalty_from_proba(&self, p: &[f64]) -> f64 {
        let total: f64 = (0..p.len()).map(|k| self.membership_value(score_from_proba(p, k))).sum();
        (total - self.kappa).max(0.0)
    }

    /// Memberships of every label, `[N, K]`, from logits on a tape.
    pub fn memberships_on<'t>(&self, logits: Var<'t>) -> Var<'t> {
        let s = logits.softmax().neg().add_scalar(1.0);
        let t = self.temperature;
        match self.threshold {
            Threshold::Alpha => s.add_scalar(-self.alpha).scale(1.0 / t).sigmoid(),
            Threshold::Quantile => {
                // With q̂ = +∞ every membership saturates at 1.
                let q = if self.q_hat.is_finite() { self.q_hat } else { 1e6 };
                s.neg().add_scalar(q).scale(1.0 / t).sigmoid()
            }
        }
    }

    /// Ω from logits on a tape; one row gives a scalar, several rows their mean.
    pub fn set_size_on<'t>(&self, logits: Var<'t>) -> Var<'t> {
        self.memberships_on(logits).sum_rows().add_scalar(-self.kappa).relu().mean()
    }

    /// `∇ₓ Ω` at a single point.
    pub fn set_size_grad(&self, model: &dyn Classifier, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let xv = tape.var(Tensor::matrix(1, x.len(), x.to_vec())?);
        let omega = self.set_size_on(model.logits_on(&tape, xv)?);
        let g = tape.grad_wrt_input(omega, xv)?;
        Ok((omega.item(), g.into_data()))
    }
}
