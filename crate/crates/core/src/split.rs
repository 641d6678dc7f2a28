//! Ten-fold cohort partitioning with a rotating 7 / 1 / 2 designation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DacError, Result};
use crate::io::atomic_write;

pub const NUM_FOLDS: usize = 10;

/// Mapping from patient id to fold `0..10`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub seed: u64,
    pub folds: BTreeMap<u64, u8>,
}

/// Which folds play which role in one cross-validation run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldDesignation {
    pub train: BTreeSet<u8>,
    pub validation: u8,
    pub test: BTreeSet<u8>,
}

impl FoldDesignation {
    /// Run `r` tests on folds `r, r+1`, validates on `r+2` and trains on the rest.
    pub fn for_run(run: usize) -> Self {
        let f = |k: usize| ((run + k) % NUM_FOLDS) as u8;
        let test: BTreeSet<u8> = [f(0), f(1)].into();
        let validation = f(2);
        let train = (0..NUM_FOLDS as u8)
            .filter(|x| !test.contains(x) && *x != validation)
            .collect();
        Self {
            train,
            validation,
            test,
        }
    }
}

impl CohortSplit {
    /// Shuffle the ids with `seed` and deal them round-robin into ten folds,
    /// so fold sizes differ by at most one.
    pub fn new(patient_ids: &[u64], seed: u64) -> Result<Self> {
        if patient_ids.len() < NUM_FOLDS {
            return Err(DacError::validation(format!(
                "need at least {NUM_FOLDS} patients to split, got {}",
                patient_ids.len()
            )));
        }
        let mut ids: Vec<u64> = patient_ids.to_vec();
        ids.sort_unstable();
        let before = ids.len();
        ids.dedup();
        if ids.len() != before {
            return Err(DacError::validation("duplicate patient ids in cohort"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
        let folds = ids
            .into_iter()
            .enumerate()
            .map(|(pos, id)| (id, (pos % NUM_FOLDS) as u8))
            .collect();
        Ok(Self { seed, folds })
    }

    pub fn fold_of(&self, id: u64) -> Option<u8> {
        self.folds.get(&id).copied()
    }

    pub fn fold_sizes(&self) -> [usize; NUM_FOLDS] {
        let mut sizes = [0; NUM_FOLDS];
        for &f in self.folds.values() {
            sizes[f as usize] += 1;
        }
        sizes
    }

    /// Patient ids in any of `folds`, ascending.
    pub fn ids_in(&self, folds: &BTreeSet<u8>) -> Vec<u64> {
        self.folds
            .iter()
            .filter(|(_, f)| folds.contains(f))
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hundred_patients_make_ten_even_folds() {
        let ids: Vec<u64> = (0..100).collect();
        let split = CohortSplit::new(&ids, 1).unwrap();
        assert_eq!(split.fold_sizes(), [10; 10]);
    }

    #[test]
    fn remainder_goes_to_leading_folds() {
        let ids: Vec<u64> = (0..103).collect();
        let split = CohortSplit::new(&ids, 5).unwrap();
        assert_eq!(split.fold_sizes(), [11, 11, 11, 10, 10, 10, 10, 10, 10, 10]);
    }

    #[test]
    fn deterministic_given_seed() {
        let ids: Vec<u64> = (0..57).map(|i| i * 3 + 1).collect();
        assert_eq!(CohortSplit::new(&ids, 9).unwrap(), CohortSplit::new(&ids, 9).unwrap());
        assert_ne!(CohortSplit::new(&ids, 9).unwrap(), CohortSplit::new(&ids, 10).unwrap());
    }

    #[test]
    fn too_few_patients() {
        assert!(CohortSplit::new(&[1, 2, 3], 0).is_err());
        assert!(CohortSplit::new(&[1; 12], 0).is_err());
    }

    #[test]
    fn designation_is_seven_one_two() {
        for run in 0..NUM_FOLDS {
            let d = FoldDesignation::for_run(run);
            assert_eq!(d.train.len(), 7);
            assert_eq!(d.test.len(), 2);
            assert!(!d.train.contains(&d.validation));
            assert!(d.train.is_disjoint(&d.test));
            assert!(!d.test.contains(&d.validation));
        }
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 10usize..300, seed in any::<u64>()) {
            let ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
            let split = CohortSplit::new(&ids, seed).unwrap();
            prop_assert_eq!(split.folds.len(), n);
            let sizes = split.fold_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let d = FoldDesignation::for_run((seed % 10) as usize);
            let mut all: Vec<u64> = split.ids_in(&d.train);
            all.extend(split.ids_in(&[d.validation].into()));
            all.extend(split.ids_in(&d.test));
            all.sort_unstable();
            prop_assert_eq!(all, ids);
        }
    }
}
