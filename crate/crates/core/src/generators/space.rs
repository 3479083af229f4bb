use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::Vae;

/// Principal components of a data matrix.
///
/// `components` is `n_z × D` with orthonormal rows ordered by decreasing
/// explained variance; each row's largest-magnitude entry is positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub components: Tensor,
    pub explained_variance: Vec<f64>,
}

impl Pca {
    pub fn fit(x: &Tensor, n_components: usize) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if n_components == 0 || n_components > d {
            return Err(Error::Config(format!(
                "pca needs 1..={d} components, got {n_components}"
            )));
        }
        if n < 2 {
            return Err(Error::EmptyReference("pca fit"));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n as f64;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            let r = x.row(i);
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]);
                }
            }
        }
        cov /= (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut data = Vec::with_capacity(n_components * d);
        let mut explained = Vec::with_capacity(n_components);
        for &k in order.iter().take(n_components) {
            let col: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let pivot = col.iter().copied().fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            data.extend(col.iter().map(|v| v * sign));
            explained.push(eig.eigenvalues[k]);
        }
        Ok(Self {
            mean,
            components: Tensor::matrix(n_components, d, data)?,
            explained_variance: explained,
        })
    }

    pub fn n_components(&self) -> usize {
        self.components.rows()
    }

    /// `(x − mean) Wᵀ`.
    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_components())
            .map(|k| {
                self.components
                    .row(k)
                    .iter()
                    .zip(x)
                    .zip(&self.mean)
                    .map(|((w, v), m)| w * (v - m))
                    .sum()
            })
            .collect()
    }

    /// `mean + z W`.
    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (k, zk) in z.iter().enumerate() {
            for (v, w) in x.iter_mut().zip(self.components.row(k)) {
                *v += zk * w;
            }
        }
        x
    }

    pub fn decode_on<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<Var<'t>> {
        z.matmul(tape.constant(self.components.clone()))?
            .add(tape.constant(Tensor::row_vector(self.mean.clone())))
    }
}

/// Where the search variable `z` lives and how it maps to features.
#[derive(Clone, Copy)]
pub enum SearchSpace<'a> {
    Feature,
    Pca(&'a Pca),
    Vae(&'a Vae),
}

impl SearchSpace<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            SearchSpace::Feature => "feature",
            SearchSpace::Pca(_) => "pca",
            SearchSpace::Vae(_) => "vae",
        }
    }

    /// `f⁻¹(x)`; for the VAE this is the posterior mean.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            SearchSpace::Feature => Ok(x.to_vec()),
            SearchSpace::Pca(p) => Ok(p.encode(x)),
            SearchSpace::Vae(v) => Ok(v.encode_mean(&Tensor::matrix(1, x.len(), x.to_vec())?)?.into_data()),
        }
    }

    /// `f(z)`.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            SearchSpace::Feature => Ok(z.to_vec()),
            SearchSpace::Pca(p) => Ok(p.decode(z)),
            SearchSpace::Vae(v) => Ok(v.decode(&Tensor::matrix(1, z.len(), z.to_vec())?)?.into_data()),
        }
    }

    pub fn decode_on<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<Var<'t>> {
        match self {
            SearchSpace::Feature => Ok(z),
            SearchSpace::Pca(p) => p.decode_on(tape, z),
            SearchSpace::Vae(v) => v.decode_on(tape, z),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> Tensor {
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|i| {
                let t = f64::from(i);
                vec![t.sin() * 3.0 + 1.0, t.cos() - 2.0 + 0.5 * t.sin(), (0.7 * t).sin()]
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn full_rank_round_trip() {
        let x = cloud();
        let pca = Pca::fit(&x, 3).unwrap();
        for i in 0..x.rows() {
            let back = pca.decode(&pca.encode(x.row(i)));
            for (a, b) in back.iter().zip(x.row(i)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn components_orthonormal_and_sorted() {
        let pca = Pca::fit(&cloud(), 3).unwrap();
        let w = &pca.components;
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = w.row(a).iter().zip(w.row(b)).map(|(u, v)| u * v).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
        assert!(pca.explained_variance.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn decoded_points_lie_in_span() {
        let pca = Pca::fit(&cloud(), 1).unwrap();
        let x = pca.decode(&[2.5]);
        let back = pca.decode(&pca.encode(&x));
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_too_many_components() {
        assert!(Pca::fit(&cloud(), 4).is_err());
    }
}
