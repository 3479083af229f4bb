use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::rng::{rng_from, tag};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub calibration: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            calibration: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, calibration: f64, test: f64) -> Self {
        Self {
            train,
            calibration,
            test,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [self.train, self.calibration, self.test];
        if all.iter().any(|f| !(*f > 0.0)) || all.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to at most 1, got {all:?}"
            )));
        }
        Ok(())
    }
}

/// Stratified split into train/calibration/test.
///
/// Each class is shuffled and the classes are interleaved proportionally
/// (an element of rank `r` in a class of size `n_c` gets key `(r + ½)/n_c`),
/// so every contiguous block of the merged order holds each class within one
/// row of its global share. The blocks are then cut at `⌊N·f⌋` sizes.
pub fn split(dataset: &Dataset, fractions: SplitFractions, seed: u64) -> Result<Dataset> {
    fractions.validate()?;
    let n = dataset.len();
    let k = dataset.n_classes();
    let mut rng = rng_from(seed, &[tag("split")]);

    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
    for class in 0..k {
        let mut members: Vec<usize> = (0..n).filter(|&i| dataset.labels[i] == class).collect();
        members.shuffle(&mut rng);
        let size = members.len() as f64;
        for (rank, idx) in members.into_iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / size, class, idx));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();

    let size = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
    let (n_cal, n_test) = (size(fractions.calibration), size(fractions.test));
    // Fractions that sum to one leave no row out: rounding leftovers go to train.
    let n_train = if fractions.train + fractions.calibration + fractions.test >= 1.0 - 1e-9 {
        n - n_cal - n_test
    } else {
        size(fractions.train)
    };
    for (name, got) in [("train", n_train), ("calibration", n_cal), ("test", n_test)] {
        if got < k {
            return Err(Error::SplitTooSmall {
                split: name,
                got,
                needed: k,
            });
        }
    }
    let mut out = dataset.clone();
    out.splits = Splits {
        train: order[..n_train].to_vec(),
        calibration: order[n_train..n_train + n_cal].to_vec(),
        test: order[n_train + n_cal..n_train + n_cal + n_test].to_vec(),
    };
    Ok(out)
}
