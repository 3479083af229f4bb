use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, EpochRecord, LossCurve, Mlp};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, tag};

/// Variational autoencoder with a Gaussian encoder and a unit-variance
/// Gaussian decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vae {
    /// `D → … → 2·n_z`: latent means followed by log-variances.
    pub encoder: Mlp,
    /// `n_z → … → D`.
    pub decoder: Mlp,
    pub latent_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub hidden: usize,
    pub latent_dim: usize,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl VaeConfig {
    /// `n_z = 2` for two features, otherwise `min(D, 8)`.
    pub fn for_dim(d: usize) -> Self {
        Self {
            hidden: 32,
            latent_dim: if d <= 2 { d } else { d.min(8) },
            beta: 0.1,
            epochs: 100,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl Vae {
    pub fn new(d: usize, hidden: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 || latent_dim > d {
            return Err(Error::Config(format!(
                "latent dimension must be in 1..={d}, got {latent_dim}"
            )));
        }
        Ok(Self {
            encoder: Mlp::new(&[d, hidden, hidden, 2 * latent_dim], derive_seed(seed, &[tag("encoder")]))?,
            decoder: Mlp::new(&[latent_dim, hidden, hidden, d], derive_seed(seed, &[tag("decoder")]))?,
            latent_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Posterior means, `N × n_z`.
    pub fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.encoder.forward(x)?;
        let rows: Vec<Vec<f64>> = (0..h.rows()).map(|i| h.row(i)[..self.latent_dim].to_vec()).collect();
        Tensor::from_rows(&rows)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z)
    }

    pub fn decode_on<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<Var<'t>> {
        self.decoder.forward_tape(tape, z)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode_mean(x)?)
    }
}

/// `KL(N(μ, diag eᵛ) ‖ N(0, I))` summed over latent dims, averaged over rows.
fn kl_term<'t>(mu: Var<'t>, logvar: Var<'t>) -> Result<Var<'t>> {
    let rows = mu.shape()[0] as f64;
    Ok(logvar
        .add_scalar(1.0)
        .sub(mu.square())?
        .sub(logvar.exp())?
        .sum()
        .scale(-0.5 / rows))
}

/// Analytic KL of a single diagonal Gaussian against the standard normal.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, v)| -0.5 * (1.0 + v - m * m - v.exp()))
        .sum()
}

/// Minimize `½‖x − x̂‖²` (averaged over rows) plus `β·KL` with the
/// reparameterization trick. Records `l_clf` = reconstruction,
/// `l_reg` = KL, `total` = ELBO loss.
pub fn train_vae(vae: &mut Vae, data: &Dataset, cfg: &VaeConfig) -> Result<LossCurve> {
    let (x_train, _) = data.train();
    if x_train.rows() == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("vae training needs rows and a positive batch size".into()));
    }
    let mut order_rng = rng_from(cfg.seed, &[tag("vae-batches")]);
    let mut eps_rng = rng_from(cfg.seed, &[tag("vae-eps")]);
    let mut enc_opt = Adam::new(cfg.adam);
    let mut dec_opt = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..x_train.rows()).collect();
    let nz = vae.latent_dim;
    let mut curve = LossCurve::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sums = [0.0; 3];
        let mut n_batches = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x_train.select_rows(batch);
            let eps_data: Vec<f64> = (0..batch.len() * nz)
                .map(|_| StandardNormal.sample(&mut eps_rng))
                .collect();
            let eps = Tensor::matrix(batch.len(), nz, eps_data)?;

            let tape = Tape::new();
            let enc = vae.encoder.bind(&tape, true);
            let dec = vae.decoder.bind(&tape, true);
            let x = tape.constant(xb);
            let h = vae.encoder.forward_bound(&enc, x)?;
            let mu = h.slice(0, nz)?;
            let logvar = h.slice(nz, nz)?;
            let z = mu.add(logvar.scale(0.5).exp().mul(tape.constant(eps))?)?;
            let x_hat = vae.decoder.forward_bound(&dec, z)?;
            let recon = x_hat.sub(x)?.square().sum().scale(0.5 / batch.len() as f64);
            let kl = kl_term(mu, logvar)?;
            let total = if cfg.beta == 0.0 { recon } else { recon.add(kl.scale(cfg.beta))? };
            if !total.item().is_finite() {
                return Err(Error::Diverged(format!("non-finite ELBO at epoch {epoch}, batch {b}")));
            }
            let grads = tape.backward(total)?;
            let g_enc: Vec<Tensor> = enc.iter().flat_map(|&(w, b)| [grads.wrt(w), grads.wrt(b)]).collect();
            let g_dec: Vec<Tensor> = dec.iter().flat_map(|&(w, b)| [grads.wrt(w), grads.wrt(b)]).collect();
            enc_opt.step(&mut vae.encoder.params_mut(), &g_enc);
            dec_opt.step(&mut vae.decoder.params_mut(), &g_dec);
            sums[0] += recon.item();
            sums[1] += kl.item();
            sums[2] += total.item();
            n_batches += 1.0;
        }
        curve.records.push(EpochRecord {
            epoch,
            l_clf: sums[0] / n_batches,
            l_gen: 0.0,
            l_reg: sums[1] / n_batches,
            total: sums[2] / n_batches,
        });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_of_standard_posterior_is_zero() {
        assert_eq!(gaussian_kl(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        let tape = Tape::new();
        let mu = tape.constant(Tensor::zeros(&[3, 2]));
        let lv = tape.constant(Tensor::zeros(&[3, 2]));
        assert_eq!(kl_term(mu, lv).unwrap().item(), 0.0);
    }

    #[test]
    fn kl_matches_closed_form() {
        let tape = Tape::new();
        let mu = tape.constant(Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap());
        let lv = tape.constant(Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap());
        let got = kl_term(mu, lv).unwrap().item();
        assert!((got - gaussian_kl(&[0.5, -1.0], &[0.3, -0.2])).abs() < 1e-14);
    }

    #[test]
    fn latent_dim_bounded_by_input() {
        assert!(Vae::new(2, 8, 3, 0).is_err());
        let vae = Vae::new(4, 8, 2, 0).unwrap();
        let x = Tensor::zeros(&[5, 4]);
        assert_eq!(vae.reconstruct(&x).unwrap().shape(), &[5, 4]);
        assert_eq!(vae.encode_mean(&x).unwrap().shape(), &[5, 2]);
    }
}
