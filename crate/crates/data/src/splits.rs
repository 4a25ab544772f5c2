//! Seeded row splits and limited downstream subsampling.
//!
//! Splits are fixed per dataset family and do not change across model seeds;
//! downstream subsets are nested across sample sizes at a fixed seed so
//! comparisons between data levels share rows.

use crate::{DataError, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitPlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Downstream training subset of size `n`, drawn from the train part.
    /// Subsets are nested: at a fixed seed the n=4 subset is a prefix of the
    /// n=10 subset, and so on.
    pub fn downstream_subsample(&self, n: usize, seed: u64) -> Result<Vec<usize>> {
        sample_downstream(&self.train, n, seed)
    }
}

/// Seeded shuffle followed by a contiguous partition into train/val/test.
pub fn make_splits(n_rows: usize, fractions: (f64, f64, f64), seed: u64) -> Result<SplitPlan> {
    let (f_train, f_val, f_test) = fractions;
    let sum = f_train + f_val + f_test;
    if (sum - 1.0).abs() > 1e-9 || f_train < 0.0 || f_val < 0.0 || f_test < 0.0 {
        return Err(DataError::Split(format!("fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let n_train = (f_train * n_rows as f64).floor() as usize;
    let n_val = (f_val * n_rows as f64).floor() as usize;
    let n_test = n_rows - n_train - n_val;
    for (frac, size, name) in [(f_train, n_train, "train"), (f_val, n_val, "val"), (f_test, n_test, "test")] {
        if frac > 0.0 && size == 0 {
            return Err(DataError::Split(format!(
                "{n_rows} rows are too few for a non-empty {name} part at fraction {frac}"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut train = order;
    let test = train.split_off(n_train + n_val);
    let val = train.split_off(n_train);
    Ok(SplitPlan { seed, train, val, test })
}

/// Uniform sample without replacement of `n` rows, seeded and nested: the
/// result for a smaller `n` at the same seed is a prefix of the result for a
/// larger `n`.
pub fn sample_downstream(rows: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > rows.len() {
        return Err(DataError::SampleTooLarge { requested: n, available: rows.len() });
    }
    let mut order = rows.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.truncate(n);
    Ok(order)
}
