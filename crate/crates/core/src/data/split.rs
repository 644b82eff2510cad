use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{data_err, Result};

/// Patient-level train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Seeded 70/30 patient split; 100 training patients (or 10 % of them when
/// fewer than 1000, at least one) move to validation.
pub fn split_patients(ids: &[String], seed: u64) -> Result<SplitSpec> {
    if ids.len() < 3 {
        return Err(data_err(format!("need at least 3 patients to split, got {}", ids.len())));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((0.7 * ids.len() as f64).round() as usize).clamp(2, ids.len() - 1);
    let test = shuffled.split_off(n_train);
    let n_val = ((0.1 * n_train as f64).round() as usize).clamp(1, 100);
    let validation = shuffled.split_off(n_train - n_val);
    Ok(SplitSpec {
        train: shuffled,
        validation,
        test,
        seed,
    })
}
