//! Datasets: synthetic generators, CSV ingestion, standardization and
//! stratified train/calibration/test splits.

mod csv_source;
mod split;
mod synthetic;

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use csv_source::{load_csv, CsvOptions};
pub use split::{split, SplitFractions};
pub use synthetic::{make_synthetic, SyntheticKind};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Disjoint row-index sets.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub calibration: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn is_empty(&self) -> bool {
        self.train.is_empty() && self.calibration.is_empty() && self.test.is_empty()
    }
}

/// Per-feature affine map applied to the raw features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Population mean/std of the given rows; zero std is clamped to 1.
    pub fn fit(x: &Tensor, rows: &[usize]) -> Self {
        let d = x.cols();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for &r in rows {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &r in rows {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        self.map_rows(x, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        self.map_rows(x, |v, m, s| v * s + m)
    }

    fn map_rows(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let d = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, self.mean[i % d], self.std[i % d]))
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }
}

/// Feature matrix with integer class labels and split indices.
///
/// Labels are stored as class indices; [`Dataset::one_hot`] gives the
/// `N × K` indicator matrix. Features are held in the (possibly
/// standardized) space models are trained in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub splits: Splits,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(name: &str, x: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: x.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                size: n_classes,
            });
        }
        let d = x.cols();
        Ok(Self {
            name: name.to_string(),
            feature_names: (0..d).map(|i| format!("x{i}")).collect(),
            class_names: (0..n_classes).map(|k| k.to_string()).collect(),
            x,
            labels,
            splits: Splits::default(),
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn one_hot(&self) -> Tensor {
        let k = self.n_classes();
        let mut data = vec![0.0; self.len() * k];
        for (i, &l) in self.labels.iter().enumerate() {
            data[i * k + l] = 1.0;
        }
        Tensor::matrix(self.len(), k, data).expect("consistent size")
    }

    pub fn rows(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.x.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn train(&self) -> (Tensor, Vec<usize>) {
        self.rows(&self.splits.train)
    }

    pub fn calibration(&self) -> (Tensor, Vec<usize>) {
        self.rows(&self.splits.calibration)
    }

    pub fn test(&self) -> (Tensor, Vec<usize>) {
        self.rows(&self.splits.test)
    }

    /// Training rows whose label is `class`.
    pub fn train_rows_of_class(&self, class: usize) -> Tensor {
        let idx: Vec<usize> = self
            .splits
            .train
            .iter()
            .copied()
            .filter(|&i| self.labels[i] == class)
            .collect();
        self.x.select_rows(&idx)
    }

    /// Fit standardization on the training split (all rows when unsplit)
    /// and apply it to every row.
    pub fn standardize(&mut self) {
        let rows: Vec<usize> = if self.splits.train.is_empty() {
            (0..self.len()).collect()
        } else {
            self.splits.train.clone()
        };
        let st = Standardization::fit(&self.x, &rows);
        self.x = st.apply(&self.x);
        self.standardization = Some(st);
    }

    /// Features mapped back to raw units.
    pub fn destandardized(&self) -> Tensor {
        match &self.standardization {
            Some(st) => st.invert(&self.x),
            None => self.x.clone(),
        }
    }

    /// Per-dimension `(min, max)` of the training rows.
    pub fn train_bounds(&self) -> Vec<(f64, f64)> {
        let rows: Vec<usize> = if self.splits.train.is_empty() {
            (0..self.len()).collect()
        } else {
            self.splits.train.clone()
        };
        let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); self.n_features()];
        for r in rows {
            for (b, &v) in bounds.iter_mut().zip(self.x.row(r)) {
                b.0 = b.0.min(v);
                b.1 = b.1.max(v);
            }
        }
        bounds
    }

    /// Copy of `x` with iid `N(0, sigma²)` noise added.
    pub fn with_noise(x: &Tensor, sigma: f64, rng: &mut Rng) -> Tensor {
        if sigma <= 0.0 {
            return x.clone();
        }
        let mut out = x.clone();
        for v in out.data_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += sigma * e;
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_feature_maps_to_zero() {
        let x = Tensor::from_rows(&[vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 6.0]]).unwrap();
        let mut ds = Dataset::new("c", x, vec![0, 1, 0], 2).unwrap();
        ds.standardize();
        let st = ds.standardization.as_ref().unwrap();
        assert_eq!(st.std[0], 1.0);
        assert!(ds.x.data().iter().step_by(2).all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_round_trip_and_moments() {
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![f64::from(i).sin() * 7.0 + 3.0, f64::from(i) * 0.3 - 2.0])
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let labels = (0..50).map(|i| i % 2).collect();
        let mut ds = Dataset::new("r", x.clone(), labels, 2).unwrap();
        ds.standardize();
        let back = ds.destandardized();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let refit = Standardization::fit(&ds.x, &(0..50).collect::<Vec<_>>());
        for (m, s) in refit.mean.iter().zip(&refit.std) {
            assert!(m.abs() < 1e-8 && (s - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn one_hot_rows_sum_to_one() {
        let x = Tensor::zeros(&[3, 1]);
        let ds = Dataset::new("o", x, vec![0, 2, 1], 3).unwrap();
        let y = ds.one_hot();
        for i in 0..3 {
            assert_eq!(y.row(i).iter().sum::<f64>(), 1.0);
            assert_eq!(y.get(i, ds.labels[i]), 1.0);
        }
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_synthetic(SyntheticKind::Moons, 40, 3).unwrap();
        let path = dir.path().join("d.json");
        ds.save_json(&path).unwrap();
        assert_eq!(Dataset::load_json(&path).unwrap(), ds);
    }
}
