use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::Classifier;

/// Batched class-conditional energy with input gradients.
pub trait EnergyModel: Sync {
    fn dim(&self) -> usize;

    /// `E(x_i | y_i)` for every row and the matching rows of `∇ₓE`.
    fn energy_grad(&self, x: &Tensor, y: &[usize]) -> Result<(Vec<f64>, Tensor)>;

    fn energies(&self, x: &Tensor, y: &[usize]) -> Result<Vec<f64>> {
        Ok(self.energy_grad(x, y)?.0)
    }
}

/// Negative target logit of a classifier.
pub struct ClassifierEnergy<'a, C: ?Sized>(pub &'a C);

impl<C: Classifier + ?Sized> EnergyModel for ClassifierEnergy<'_, C> {
    fn dim(&self) -> usize {
        self.0.input_dim()
    }

    fn energy_grad(&self, x: &Tensor, y: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let tape = Tape::new();
        let xv = tape.var(x.clone());
        let e = self.0.logits_on(&tape, xv)?.pick(y)?.neg();
        let energies = e.value().into_data();
        let grad = tape.grad_wrt_input(e.sum(), xv)?;
        Ok((energies, grad))
    }

    fn energies(&self, x: &Tensor, y: &[usize]) -> Result<Vec<f64>> {
        let logits = self.0.logits(x)?;
        Ok(y.iter().enumerate().map(|(i, &c)| -logits.get(i, c)).collect())
    }
}

/// `½‖x − m‖²`, the same for every class. Its Langevin stationary law is
/// Gaussian around `m`, which makes it a convenient reference energy.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEnergy {
    pub center: Vec<f64>,
}

impl GaussianEnergy {
    pub fn new(center: Vec<f64>) -> Self {
        Self { center }
    }
}

impl EnergyModel for GaussianEnergy {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn energy_grad(&self, x: &Tensor, y: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        if x.cols() != self.center.len() || x.rows() != y.len() {
            return Err(Error::Shape {
                op: "gaussian energy",
                lhs: x.shape().to_vec(),
                rhs: vec![y.len(), self.center.len()],
            });
        }
        let mut grad = x.clone();
        let d = self.center.len();
        for (i, v) in grad.data_mut().iter_mut().enumerate() {
            *v -= self.center[i % d];
        }
        let energies = (0..x.rows())
            .map(|i| 0.5 * grad.row(i).iter().map(|g| g * g).sum::<f64>())
            .collect();
        Ok((energies, grad))
    }
}
