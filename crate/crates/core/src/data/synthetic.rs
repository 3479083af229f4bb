use std::f64::consts::PI;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{rng_from, tag};

/// Two-class, two-feature toy problems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Gaussian blobs centred at (−2, −2) and (2, 2), unit covariance.
    LinearlySeparable,
    /// Interleaved half circles, noise std 0.1.
    Moons,
    /// Concentric circles of radius 0.5 (class 0) and 1 (class 1), noise std 0.05.
    Circles,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 3] = [Self::LinearlySeparable, Self::Moons, Self::Circles];

    pub fn name(self) -> &'static str {
        match self {
            Self::LinearlySeparable => "linearly_separable",
            Self::Moons => "moons",
            Self::Circles => "circles",
        }
    }

    pub fn default_noise(self) -> f64 {
        match self {
            Self::LinearlySeparable => 1.0,
            Self::Moons => 0.1,
            Self::Circles => 0.05,
        }
    }

    /// Generate `n` balanced rows with the given noise level. For the blobs
    /// the noise is the blob standard deviation.
    pub fn generate(self, n: usize, seed: u64, noise: f64) -> Result<Dataset> {
        if n < 4 || n % 2 != 0 {
            return Err(Error::Config(format!(
                "synthetic datasets need an even n >= 4, got {n}"
            )));
        }
        let mut rng = rng_from(seed, &[tag(self.name())]);
        let half = n / 2;
        let mut rows: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
        match self {
            Self::LinearlySeparable => {
                for (class, c) in [(0usize, -2.0), (1, 2.0)] {
                    for _ in 0..half {
                        rows.push(([c, c], class));
                    }
                }
            }
            Self::Moons => {
                for i in 0..half {
                    let t = PI * i as f64 / (half - 1) as f64;
                    rows.push(([t.cos(), t.sin()], 0));
                }
                for i in 0..half {
                    let t = PI * i as f64 / (half - 1) as f64;
                    rows.push(([1.0 - t.cos(), 0.5 - t.sin()], 1));
                }
            }
            Self::Circles => {
                for (class, r) in [(0usize, 0.5), (1, 1.0)] {
                    for i in 0..half {
                        let t = 2.0 * PI * i as f64 / half as f64;
                        rows.push(([r * t.cos(), r * t.sin()], class));
                    }
                }
            }
        }
        for (p, _) in rows.iter_mut() {
            for v in p.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += noise * e;
            }
        }
        rows.shuffle(&mut rng);
        let data = rows.iter().flat_map(|(p, _)| p.iter().copied()).collect();
        let labels = rows.iter().map(|&(_, l)| l).collect();
        Dataset::new(self.name(), Tensor::matrix(n, 2, data)?, labels, 2)
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                what: "synthetic dataset",
                name: s.to_string(),
            })
    }
}

/// Generate a synthetic dataset with its default noise level.
pub fn make_synthetic(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset> {
    kind.generate(n, seed, kind.default_noise())
}
