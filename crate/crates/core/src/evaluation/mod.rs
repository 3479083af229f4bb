//! Per-counterfactual metrics and their aggregation across runs.

mod report;

use serde::{Deserialize, Serialize};

pub use report::{aggregate, read_rows_csv, write_rows_csv, BenchmarkReport, BenchmarkRow, Flag, GroupAggregate, MetricStats};

use crate::autodiff::Tensor;
use crate::conformal::ConformalCalibrator;
use crate::error::{Error, Result};
use crate::models::Classifier;

/// Features within this distance of the factual count as unperturbed.
pub const REDUNDANCY_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Unfaithfulness,
    Implausibility,
    Cost,
    Redundancy,
    Uncertainty,
    Validity,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Self::Unfaithfulness,
        Self::Implausibility,
        Self::Cost,
        Self::Redundancy,
        Self::Uncertainty,
        Self::Validity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Unfaithfulness => "unfaithfulness",
            Self::Implausibility => "implausibility",
            Self::Cost => "cost",
            Self::Redundancy => "redundancy",
            Self::Uncertainty => "uncertainty",
            Self::Validity => "validity",
        }
    }

    /// Whether larger values are better.
    pub fn higher_is_better(self) -> bool {
        matches!(self, Self::Redundancy | Self::Validity)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub unfaithfulness: f64,
    pub implausibility: f64,
    pub cost: f64,
    pub redundancy: f64,
    pub uncertainty: f64,
    pub validity: f64,
}

impl MetricRow {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Unfaithfulness => self.unfaithfulness,
            Metric::Implausibility => self.implausibility,
            Metric::Cost => self.cost,
            Metric::Redundancy => self.redundancy,
            Metric::Uncertainty => self.uncertainty,
            Metric::Validity => self.validity,
        }
    }

    pub fn values(&self) -> [f64; 6] {
        Metric::ALL.map(|m| self.get(m))
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        Self {
            unfaithfulness: v[0],
            implausibility: v[1],
            cost: v[2],
            redundancy: v[3],
            uncertainty: v[4],
            validity: v[5],
        }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt()
}

fn mean_distance(x: &[f64], reference: &Tensor, what: &'static str) -> Result<f64> {
    if reference.rows() == 0 || reference.numel() == 0 {
        return Err(Error::EmptyReference(what));
    }
    if reference.cols() != x.len() {
        return Err(Error::Shape {
            op: what,
            lhs: vec![x.len()],
            rhs: reference.shape().to_vec(),
        });
    }
    let n = reference.rows();
    Ok((0..n).map(|i| euclidean(x, reference.row(i))).sum::<f64>() / n as f64)
}

/// Mean Euclidean distance from `x` to the target-class training rows.
pub fn implausibility(x: &[f64], target_rows: &Tensor) -> Result<f64> {
    mean_distance(x, target_rows, "implausibility")
}

/// Mean Euclidean distance from `x` to conditional samples of the model.
pub fn unfaithfulness(x: &[f64], samples: &Tensor) -> Result<f64> {
    mean_distance(x, samples, "unfaithfulness")
}

/// `‖x′ − x‖₁`.
pub fn cost(x_cf: &[f64], factual: &[f64]) -> f64 {
    x_cf.iter().zip(factual).map(|(a, b)| (a - b).abs()).sum()
}

/// Share of features with `|x′_d − x_d| ≤ tol`.
pub fn redundancy(x_cf: &[f64], factual: &[f64], tol: f64) -> f64 {
    let same = x_cf.iter().zip(factual).filter(|(a, b)| (*a - *b).abs() <= tol).count();
    same as f64 / factual.len().max(1) as f64
}

/// Smooth set-size penalty at `x′`.
pub fn uncertainty(cal: &ConformalCalibrator, model: &dyn Classifier, x_cf: &[f64]) -> Result<f64> {
    cal.set_size_penalty(model, x_cf)
}

/// 1 if the model predicts `target` at `x′`, else 0.
pub fn validity(model: &dyn Classifier, x_cf: &[f64], target: usize) -> Result<f64> {
    let pred = model.predict_label(&Tensor::matrix(1, x_cf.len(), x_cf.to_vec())?)?;
    Ok(if pred[0] == target { 1.0 } else { 0.0 })
}

/// Everything the six metrics need for one counterfactual.
pub struct EvalContext<'a> {
    pub model: &'a dyn Classifier,
    pub calibrator: &'a ConformalCalibrator,
    pub target_rows: &'a Tensor,
    pub samples: &'a Tensor,
}

pub fn evaluate(ctx: &EvalContext, x_cf: &[f64], factual: &[f64], target: usize) -> Result<MetricRow> {
    Ok(MetricRow {
        unfaithfulness: unfaithfulness(x_cf, ctx.samples)?,
        implausibility: implausibility(x_cf, ctx.target_rows)?,
        cost: cost(x_cf, factual),
        redundancy: redundancy(x_cf, factual, REDUNDANCY_TOL),
        uncertainty: uncertainty(ctx.calibrator, ctx.model, x_cf)?,
        validity: validity(ctx.model, x_cf, target)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_examples() {
        let targets = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(implausibility(&[0.0, 0.0], &targets).unwrap(), 1.0);
        let single = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(unfaithfulness(&[3.0, 4.0], &single).unwrap(), 0.0);
        assert_eq!(unfaithfulness(&[0.0, 0.0], &single).unwrap(), 5.0);
        assert!(matches!(
            implausibility(&[0.0], &Tensor::zeros(&[0, 1])),
            Err(Error::EmptyReference(_))
        ));
    }

    #[test]
    fn cost_and_redundancy() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(cost(&x, &x), 0.0);
        assert_eq!(redundancy(&x, &x, REDUNDANCY_TOL), 1.0);
        let moved = [1.0, 2.5, 3.0, 4.0 + 1e-9];
        assert_eq!(redundancy(&moved, &x, REDUNDANCY_TOL), 0.75);
        assert!((cost(&moved, &x) - 0.5).abs() < 1e-8);
    }
}
