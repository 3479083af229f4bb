use std::collections::VecDeque;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::rng::Rng;

/// Persistent store of chain endpoints for contrastive training.
///
/// Holds at most `capacity` samples and evicts the oldest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBuffer {
    pub capacity: usize,
    pub reinit_prob: f64,
    dim: usize,
    samples: VecDeque<Vec<f64>>,
}

impl SampleBuffer {
    pub fn new(dim: usize, capacity: usize, reinit_prob: f64) -> Self {
        Self {
            capacity,
            reinit_prob,
            dim,
            samples: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.iter().map(Vec::as_slice)
    }

    /// `n` chain starts: each a fresh `N(0, I)` draw with probability
    /// `reinit_prob` (always, while the buffer is empty), otherwise a uniform
    /// pick from the stored samples.
    pub fn init_draw(&self, n: usize, rng: &mut Rng) -> Tensor {
        let mut data = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let fresh = self.samples.is_empty() || rng.random::<f64>() < self.reinit_prob;
            if fresh {
                for _ in 0..self.dim {
                    let v: f64 = StandardNormal.sample(rng);
                    data.push(v);
                }
            } else {
                let i = rng.random_range(0..self.samples.len());
                data.extend_from_slice(&self.samples[i]);
            }
        }
        Tensor::matrix(n, self.dim, data).expect("sized")
    }

    /// Append every row of `endpoints`.
    pub fn push(&mut self, endpoints: &Tensor) {
        for i in 0..endpoints.rows() {
            if self.capacity == 0 {
                return;
            }
            if self.samples.len() == self.capacity {
                self.samples.pop_front();
            }
            self.samples.push_back(endpoints.row(i).to_vec());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn fifo_eviction() {
        let mut buf = SampleBuffer::new(1, 3, 0.05);
        buf.push(&Tensor::matrix(5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let kept: Vec<f64> = buf.samples().map(|s| s[0]).collect();
        assert_eq!(kept, vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn reproducible_draws() {
        let mut buf = SampleBuffer::new(2, 10, 0.5);
        buf.push(&Tensor::matrix(2, 2, vec![9.0, 9.0, 7.0, 7.0]).unwrap());
        let a = buf.init_draw(20, &mut rng_from(4, &[]));
        let b = buf.init_draw(20, &mut rng_from(4, &[]));
        assert_eq!(a, b);
    }

    #[test]
    fn empty_buffer_draws_fresh() {
        let buf = SampleBuffer::new(2, 10, 0.0);
        let x = buf.init_draw(50, &mut rng_from(1, &[]));
        assert!(x.data().iter().any(|&v| v != 0.0));
        assert_eq!(x.shape(), &[50, 2]);
    }
}
