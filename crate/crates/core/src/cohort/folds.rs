use rand::seq::SliceRandom;

use crate::error::{LneError, Result};
use crate::seed::SeedStream;

/// One cross-validation fold, partitioned at the subject level.
#[derive(Clone, Debug, PartialEq)]
pub struct Fold {
    pub index: usize,
    pub test: Vec<String>,
    /// Held out of training for model selection; drawn from the non-test subjects.
    pub val: Vec<String>,
    pub train: Vec<String>,
}

pub const VALIDATION_FRACTION: f64 = 0.1;

/// Split subjects into `k` disjoint test folds of sizes differing by at most
/// one, carving ~10% of each fold's training side out for validation.
pub fn split_folds(subject_ids: &[String], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k == 0 || k > subject_ids.len() {
        return Err(LneError::Invalid(format!(
            "cannot split {} subjects into {k} folds",
            subject_ids.len()
        )));
    }
    let stream = SeedStream::new(seed).derive("folds");
    let mut ids = subject_ids.to_vec();
    ids.sort();
    ids.shuffle(&mut stream.rng());
    let assignments: Vec<Vec<String>> = (0..k)
        .map(|f| ids.iter().skip(f).step_by(k).cloned().collect())
        .collect();
    Ok((0..k)
        .map(|f| {
            let mut rest: Vec<String> = (0..k)
                .filter(|&g| g != f)
                .flat_map(|g| assignments[g].iter().cloned())
                .collect();
            rest.sort();
            rest.shuffle(&mut stream.index(f as u64).rng());
            let n_val = if rest.len() >= 2 {
                ((rest.len() as f64 * VALIDATION_FRACTION).round() as usize).max(1)
            } else {
                0
            };
            let mut val = rest[..n_val].to_vec();
            let mut train = rest[n_val..].to_vec();
            let mut test = assignments[f].clone();
            val.sort();
            train.sort();
            test.sort();
            Fold {
                index: f,
                test,
                val,
                train,
            }
        })
        .collect())
}
