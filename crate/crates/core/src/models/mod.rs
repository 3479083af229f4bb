//! Differentiable classifiers and the VAE used for latent-space search.
//!
//! Every classifier exposes logits `μ_θ(x)`; the class-conditional energy is
//! the negative logit, `E_θ(x|y) = −μ_θ(x)[y]`.

mod adam;
mod mlp;
mod train;
mod vae;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use mlp::{BoundLayer, Linear, Mlp};
pub use train::{
    cross_entropy, train_classifier, train_jem, train_network, EpochRecord, JemConfig, JemTraining, LossCurve,
    TrainConfig,
};
pub use vae::{gaussian_kl, train_vae, Vae, VaeConfig};

use crate::autodiff::{Tape, Tensor, Var};
use crate::conformal::ConformalCalibrator;
use crate::error::{Error, Result};
use crate::sampler::SgldConfig;

pub trait Classifier: Send + Sync {
    fn input_dim(&self) -> usize;

    fn n_classes(&self) -> usize;

    /// `N × K` logits for an `N × D` input.
    fn logits(&self, x: &Tensor) -> Result<Tensor>;

    /// Logits recorded on `tape`, with the parameters held constant.
    fn logits_on<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>>;

    fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.logits(x)?;
        let k = logits.cols();
        let mut data = logits.into_data();
        for row in data.chunks_mut(k) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Tensor::matrix(data.len() / k.max(1), k, data)
    }

    fn predict_label(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    /// `E_θ(x|y)` for a single point.
    fn energy(&self, x: &[f64], y: usize) -> Result<f64> {
        if y >= self.n_classes() {
            return Err(Error::Index {
                what: "class",
                index: y,
                size: self.n_classes(),
            });
        }
        let logits = self.logits(&Tensor::matrix(1, x.len(), x.to_vec())?)?;
        Ok(-logits.get(0, y))
    }

    fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict_label(x)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Classifier for Mlp {
    fn input_dim(&self) -> usize {
        Mlp::input_dim(self)
    }

    fn n_classes(&self) -> usize {
        self.output_dim()
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }

    fn logits_on<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        self.forward_tape(tape, x)
    }
}

/// Independently trained MLPs whose logits are averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepEnsemble {
    pub members: Vec<Mlp>,
}

impl DeepEnsemble {
    pub fn new(sizes: &[usize], m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("an ensemble needs at least one member".into()));
        }
        let members = (0..m as u64)
            .map(|i| Mlp::new(sizes, crate::rng::derive_seed(seed, &[i])))
            .collect::<Result<_>>()?;
        Ok(Self { members })
    }
}

impl Classifier for DeepEnsemble {
    fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    fn n_classes(&self) -> usize {
        self.members[0].output_dim()
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut acc = self.members[0].forward(x)?;
        for m in &self.members[1..] {
            let l = m.forward(x)?;
            acc.data_mut().iter_mut().zip(l.data()).for_each(|(a, b)| *a += b);
        }
        let scale = 1.0 / self.members.len() as f64;
        acc.data_mut().iter_mut().for_each(|v| *v *= scale);
        Ok(acc)
    }

    fn logits_on<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let mut acc = self.members[0].forward_tape(tape, x)?;
        for m in &self.members[1..] {
            acc = acc.add(m.forward_tape(tape, x)?)?;
        }
        Ok(acc.scale(1.0 / self.members.len() as f64))
    }
}

/// The network underneath a classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Network {
    Mlp(Mlp),
    Ensemble(DeepEnsemble),
}

impl Network {
    fn inner(&self) -> &dyn Classifier {
        match self {
            Network::Mlp(m) => m,
            Network::Ensemble(e) => e,
        }
    }

    pub fn members_mut(&mut self) -> Vec<&mut Mlp> {
        match self {
            Network::Mlp(m) => vec![m],
            Network::Ensemble(e) => e.members.iter_mut().collect(),
        }
    }
}

impl Classifier for Network {
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }

    fn n_classes(&self) -> usize {
        self.inner().n_classes()
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.inner().logits(x)
    }

    fn logits_on<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        self.inner().logits_on(tape, x)
    }
}

/// Joint energy model: a classifier trained with the contrastive energy
/// objective. Only the network is needed at inference; the training
/// configuration is kept for provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jem {
    pub net: Network,
    pub config: JemConfig,
}

impl Jem {
    pub fn sgld(&self) -> &SgldConfig {
        &self.config.sgld
    }
}

impl Classifier for Jem {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn n_classes(&self) -> usize {
        self.net.n_classes()
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.net.logits(x)
    }

    fn logits_on<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        self.net.logits_on(tape, x)
    }
}

/// Any of the supported classifiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Mlp(Mlp),
    Ensemble(DeepEnsemble),
    Jem(Jem),
}

impl Model {
    fn inner(&self) -> &dyn Classifier {
        match self {
            Model::Mlp(m) => m,
            Model::Ensemble(e) => e,
            Model::Jem(j) => j,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Mlp(_) => "mlp",
            Model::Ensemble(_) => "ensemble",
            Model::Jem(_) => "jem",
        }
    }
}

impl Classifier for Model {
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }

    fn n_classes(&self) -> usize {
        self.inner().n_classes()
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.inner().logits(x)
    }

    fn logits_on<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        self.inner().logits_on(tape, x)
    }
}

/// On-disk form of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: Model,
    pub seed: u64,
    pub dataset: String,
    /// Free-form training configuration.
    pub training: serde_json::Value,
    pub test_accuracy: Option<f64>,
    pub calibrator: Option<ConformalCalibrator>,
}

impl ModelFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_mlp_is_uniform() {
        let mlp = Mlp::zeros(&[2, 4, 3]).unwrap();
        let p = mlp.predict_proba(&Tensor::matrix(2, 2, vec![1.0, -5.0, 3.0, 0.2]).unwrap()).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn energy_is_negative_logit() {
        let mut mlp = Mlp::zeros(&[1, 2]).unwrap();
        mlp.layers[0].bias = Tensor::vector(vec![2.0, -1.0]);
        assert_eq!(mlp.energy(&[0.3], 0).unwrap(), -2.0);
        assert_eq!(mlp.energy(&[0.3], 1).unwrap(), 1.0);
        assert!(mlp.energy(&[0.3], 2).is_err());
    }

    #[test]
    fn identical_members_match_single() {
        let one = Mlp::new(&[3, 8, 2], 5).unwrap();
        let ens = DeepEnsemble {
            members: vec![one.clone(); 5],
        };
        let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 0.1, -0.3]).unwrap();
        let a = ens.logits(&x).unwrap();
        let b = one.logits(&x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_tape_matches_plain() {
        let ens = DeepEnsemble::new(&[2, 6, 3], 3, 1).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.4, -0.9]).unwrap();
        let tape = Tape::new();
        let on = ens.logits_on(&tape, tape.constant(x.clone())).unwrap().value();
        let plain = ens.logits(&x).unwrap();
        for (u, v) in on.data().iter().zip(plain.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let file = ModelFile {
            model: Model::Ensemble(DeepEnsemble::new(&[2, 4, 2], 2, 3).unwrap()),
            seed: 3,
            dataset: "moons".into(),
            training: serde_json::json!({"epochs": 1}),
            test_accuracy: Some(0.5),
            calibrator: None,
        };
        file.save(&path).unwrap();
        assert_eq!(ModelFile::load(&path).unwrap(), file);
    }
}
