use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, Mlp, Network};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, tag, Rng};
use crate::sampler::{sgld_run, standard_normal_rows, ClassifierEnergy, SampleBuffer, SgldConfig, SgldInit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Standard deviation of Gaussian noise added to training inputs; 0 disables it.
    pub input_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            input_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JemConfig {
    pub sgld: SgldConfig,
    /// λ on the squared-energy penalty.
    pub lambda_reg: f64,
    /// Share of each minibatch that gets an SGLD chain.
    pub gen_batch_fraction: f64,
    pub buffer_capacity: usize,
    pub reinit_prob: f64,
    /// When the SGLD config has no clamp box, clamp chains to the training
    /// range widened by this margin.
    pub clamp_margin: Option<f64>,
}

impl Default for JemConfig {
    fn default() -> Self {
        Self {
            sgld: SgldConfig {
                steps: 50,
                ..SgldConfig::default()
            },
            lambda_reg: 0.5,
            gen_batch_fraction: 0.5,
            buffer_capacity: 10_000,
            reinit_prob: 0.05,
            clamp_margin: Some(1.0),
        }
    }
}

/// Per-epoch means of the batch losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_clf: f64,
    pub l_gen: f64,
    pub l_reg: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub records: Vec<EpochRecord>,
}

impl LossCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "epoch,l_clf,l_gen,l_reg,total")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{},{}", r.epoch, r.l_clf, r.l_gen, r.l_reg, r.total)?;
        }
        Ok(())
    }
}

/// Mean cross-entropy of `logits` against class indices.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    Ok(logits.logsumexp().sub(logits.pick(labels)?)?.mean())
}

struct GenState<'a> {
    cfg: &'a JemConfig,
    sgld: SgldConfig,
    buffer: SampleBuffer,
    rng: Rng,
    seed: u64,
    calls: u64,
}

impl GenState<'_> {
    fn sample(&mut self, mlp: &Mlp, targets: &[usize]) -> Result<Tensor> {
        let n = targets.len();
        let mut chain_rngs: Vec<Rng> = (0..n as u64)
            .map(|c| rng_from(self.seed, &[tag("sgld"), self.calls, c]))
            .collect();
        self.calls += 1;
        let x0 = match self.sgld.init {
            SgldInit::Buffer => self.buffer.init_draw(n, &mut self.rng),
            SgldInit::Random => standard_normal_rows(n, mlp.input_dim(), &mut chain_rngs),
        };
        let x = sgld_run(&ClassifierEnergy(mlp), targets, &x0, &self.sgld, &mut chain_rngs)?;
        self.buffer.push(&x);
        Ok(x)
    }
}

fn fit(mlp: &mut Mlp, data: &Dataset, cfg: &TrainConfig, mut gen: Option<&mut GenState>) -> Result<LossCurve> {
    let (x_train, y_train) = data.train();
    if y_train.is_empty() {
        return Err(Error::SplitTooSmall {
            split: "train",
            got: 0,
            needed: 1,
        });
    }
    mlp.check_input(&x_train)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order_rng = rng_from(cfg.seed, &[tag("batches")]);
    let mut noise_rng = rng_from(cfg.seed, &[tag("input-noise")]);
    let mut opt = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..y_train.len()).collect();
    let mut curve = LossCurve::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sums = [0.0; 4];
        let mut n_batches = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let xb = Dataset::with_noise(&x_train.select_rows(batch), cfg.input_noise, &mut noise_rng);
            let yb: Vec<usize> = batch.iter().map(|&i| y_train[i]).collect();

            let n_gen = gen
                .as_ref()
                .map_or(0, |g| (g.cfg.gen_batch_fraction * batch.len() as f64 + 1e-9).floor() as usize)
                .min(batch.len());
            let x_hat = match gen.as_deref_mut() {
                Some(g) if n_gen > 0 => Some(g.sample(mlp, &yb[..n_gen])?),
                _ => None,
            };

            let tape = Tape::new();
            let params = mlp.bind(&tape, true);
            let logits = mlp.forward_bound(&params, tape.constant(xb))?;
            let l_clf = cross_entropy(logits, &yb)?;
            let mut total = l_clf;
            let (mut l_gen_v, mut l_reg_v) = (0.0, 0.0);
            if let (Some(x_hat), Some(g)) = (x_hat, gen.as_ref()) {
                let e_real = logits.pick(&yb)?.slice(0, n_gen)?.neg();
                let e_fake = mlp.forward_bound(&params, tape.constant(x_hat))?.pick(&yb[..n_gen])?.neg();
                let worst = e_real
                    .value()
                    .data()
                    .iter()
                    .chain(e_fake.value().data())
                    .fold(0.0_f64, |m, e| m.max(e.abs()));
                if !(worst <= 1e6) {
                    return Err(Error::Diverged(format!(
                        "energy magnitude {worst:e} exceeds 1e6 at epoch {epoch}"
                    )));
                }
                let l_gen = e_real.mean().sub(e_fake.mean())?;
                let l_reg = e_real.square().mean().add(e_fake.square().mean())?;
                l_gen_v = l_gen.item();
                l_reg_v = l_reg.item();
                total = total.add(l_gen)?;
                if g.cfg.lambda_reg != 0.0 {
                    total = total.add(l_reg.scale(g.cfg.lambda_reg))?;
                }
            }
            let loss = total.item();
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, batch {b} (training rows {:?})",
                    batch
                )));
            }
            let grads = tape.backward(total)?;
            let grads: Vec<Tensor> = params.iter().flat_map(|&(w, b)| [grads.wrt(w), grads.wrt(b)]).collect();
            opt.step(&mut mlp.params_mut(), &grads);

            sums[0] += l_clf.item();
            sums[1] += l_gen_v;
            sums[2] += l_reg_v;
            sums[3] += loss;
            n_batches += 1.0;
        }
        curve.records.push(EpochRecord {
            epoch,
            l_clf: sums[0] / n_batches,
            l_gen: sums[1] / n_batches,
            l_reg: sums[2] / n_batches,
            total: sums[3] / n_batches,
        });
    }
    Ok(curve)
}

/// Minibatch Adam on cross-entropy over the training split.
pub fn train_classifier(mlp: &mut Mlp, data: &Dataset, cfg: &TrainConfig) -> Result<LossCurve> {
    fit(mlp, data, cfg, None)
}

fn member_config(cfg: &TrainConfig, i: usize, n: usize) -> TrainConfig {
    TrainConfig {
        seed: if n == 1 { cfg.seed } else { derive_seed(cfg.seed, &[i as u64]) },
        ..cfg.clone()
    }
}

/// Train every member of a network independently; ensemble members get
/// seeds derived from `cfg.seed`.
pub fn train_network(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<LossCurve>> {
    let mut members = net.members_mut();
    let n = members.len();
    members
        .iter_mut()
        .enumerate()
        .map(|(i, m)| train_classifier(m, data, &member_config(cfg, i, n)))
        .collect()
}

pub struct JemTraining {
    /// One curve per network member.
    pub curves: Vec<LossCurve>,
    pub buffers: Vec<SampleBuffer>,
}

/// Joint energy training: cross-entropy plus the contrastive energy term
/// `mean E(x|y) − mean E(x̂|y)` on SGLD samples `x̂`, plus `λ` times the
/// mean squared energies of both batches.
pub fn train_jem(net: &mut Network, data: &Dataset, cfg: &TrainConfig, jem: &JemConfig) -> Result<JemTraining> {
    jem.sgld.validate()?;
    if !(0.0..=1.0).contains(&jem.gen_batch_fraction) || jem.lambda_reg < 0.0 {
        return Err(Error::Config(format!(
            "gen_batch_fraction must be in [0, 1] and lambda_reg >= 0 (got {}, {})",
            jem.gen_batch_fraction, jem.lambda_reg
        )));
    }
    let mut sgld = jem.sgld.clone();
    if let (None, Some(margin)) = (&sgld.clamp, jem.clamp_margin) {
        sgld = sgld.with_clamp_around(&data.train_bounds(), margin);
    }
    let mut members = net.members_mut();
    let n = members.len();
    let mut curves = Vec::with_capacity(n);
    let mut buffers = Vec::with_capacity(n);
    for (i, m) in members.iter_mut().enumerate() {
        let mcfg = member_config(cfg, i, n);
        let mut state = GenState {
            cfg: jem,
            sgld: sgld.clone(),
            buffer: SampleBuffer::new(data.n_features(), jem.buffer_capacity, jem.reinit_prob),
            rng: rng_from(mcfg.seed, &[tag("buffer")]),
            seed: mcfg.seed,
            calls: 0,
        };
        curves.push(fit(m, data, &mcfg, Some(&mut state))?);
        buffers.push(state.buffer);
    }
    Ok(JemTraining { curves, buffers })
}
