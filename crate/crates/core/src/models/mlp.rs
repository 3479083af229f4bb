use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Dense layer `x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Fully connected network with ReLU hidden activations and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub layers: Vec<Linear>,
}

/// Parameters of one layer placed on a tape.
pub type BoundLayer<'t> = (Var<'t>, Var<'t>);

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let mut rng = rng_from(seed, &[]);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let std = (2.0 / w[0] as f64).sqrt();
                let data = (0..w[0] * w[1])
                    .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect();
                Linear {
                    weight: Tensor::matrix(w[0], w[1], data).expect("sized"),
                    bias: Tensor::zeros(&[w[1]]),
                }
            })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Linear {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp input",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        Ok(())
    }

    /// Forward pass without a tape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.weight)?;
            let n = layer.bias.numel();
            for (j, v) in z.data_mut().iter_mut().enumerate() {
                *v += layer.bias.data()[j % n];
                if i < last && *v < 0.0 {
                    *v = 0.0;
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Place the parameters on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<BoundLayer<'t>> {
        self.layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.var(l.weight.clone()), tape.var(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect()
    }

    /// Forward pass on a tape with parameters from [`Mlp::bind`].
    pub fn forward_bound<'t>(&self, params: &[BoundLayer<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp input",
                lhs: shape,
                rhs: vec![self.input_dim()],
            });
        }
        let last = params.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in params.iter().enumerate() {
            h = h.matmul(w)?.add(b)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn forward_tape<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let params = self.bind(tape, false);
        self.forward_bound(&params, x)
    }

    /// Mutable views of every parameter tensor, in [`Mlp::bind`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tape_and_plain_forward_agree() {
        let mlp = Mlp::new(&[3, 5, 4, 2], 11).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 2.0, 1.5, 0.3, -0.7]).unwrap();
        let tape = Tape::new();
        let out = mlp.forward_tape(&tape, tape.constant(x.clone())).unwrap().value();
        let plain = mlp.forward(&x).unwrap();
        for (a, b) in out.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_width_is_rejected() {
        let mlp = Mlp::new(&[2, 4, 2], 0).unwrap();
        assert!(mlp.forward(&Tensor::zeros(&[1, 3])).is_err());
        assert!(Mlp::new(&[2], 0).is_err());
    }
}
