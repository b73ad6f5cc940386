//! Patient-level k-fold cross-validation splits, stratified by dataset.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    /// Patient id to the fold in which it is held out.
    pub assignments: BTreeMap<String, usize>,
    pub folds: Vec<Fold>,
}

impl FoldSplit {
    pub fn fold(&self, index: usize) -> Result<&Fold> {
        self.folds
            .get(index)
            .ok_or_else(|| Error::Split(format!("fold {index} out of range for k = {}", self.k)))
    }
}

pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

/// Shuffles each dataset's patients with one seeded generator and deals
/// them round-robin into `k` folds. The dealing position carries over from
/// one dataset to the next (datasets in sorted order) so fold sizes stay
/// within one of each other overall.
///
/// For fold `i`, the test set is fold `i`; `max(1, round(val_fraction · r))`
/// of the remaining `r` patients, picked by a seeded shuffle, are
/// validation and the rest train. All lists are sorted.
pub fn split_folds<P, D>(entries: &[(P, D)], k: usize, seed: u64, val_fraction: f64) -> Result<FoldSplit>
where
    P: AsRef<str>,
    D: AsRef<str>,
{
    if k < 2 {
        return Err(Error::Split(format!("k = {k}; need at least 2 folds")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Split(format!("val_fraction {val_fraction} must lie in [0, 1)")));
    }
    let mut by_dataset: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (p, d) in entries {
        if !seen.insert(p.as_ref()) {
            return Err(Error::Split(format!("patient {} listed more than once", p.as_ref())));
        }
        by_dataset.entry(d.as_ref()).or_default().push(p.as_ref());
    }
    if let Some((d, ps)) = by_dataset.iter().find(|(_, ps)| ps.len() < k) {
        return Err(Error::Split(format!("dataset {d} has {} patients, fewer than k = {k}", ps.len())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = BTreeMap::new();
    let mut slot = 0usize;
    for patients in by_dataset.values_mut() {
        patients.sort_unstable();
        patients.shuffle(&mut rng);
        for p in patients.iter() {
            assignments.insert(p.to_string(), slot % k);
            slot += 1;
        }
    }

    let folds = (0..k)
        .map(|i| {
            let mut test = Vec::new();
            let mut rest = Vec::new();
            for (p, &f) in &assignments {
                if f == i { &mut test } else { &mut rest }.push(p.clone());
            }
            let n_val = if rest.len() > 1 {
                ((val_fraction * rest.len() as f64).round() as usize).clamp(1, rest.len() - 1)
            } else {
                0
            };
            let mut order = rest.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1))));
            let val: BTreeSet<String> = order.into_iter().take(n_val).collect();
            let train = rest.into_iter().filter(|p| !val.contains(p)).collect();
            Fold {
                train,
                val: val.into_iter().collect(),
                test,
            }
        })
        .collect();
    Ok(FoldSplit { k, assignments, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn patients(n: usize, dataset: &str) -> Vec<(String, String)> {
        (0..n).map(|i| (format!("{dataset}-{i:03}"), dataset.to_string())).collect()
    }

    #[test]
    fn ten_patients_five_folds() {
        let split = split_folds(&patients(10, "a"), 5, 1, 0.1).unwrap();
        let mut union = BTreeSet::new();
        for f in &split.folds {
            assert_eq!(f.test.len(), 2);
            for p in &f.test {
                assert!(union.insert(p.clone()), "{p} in two test folds");
            }
            assert_eq!(f.val.len(), 1);
            assert_eq!(f.train.len(), 7);
        }
        assert_eq!(union.len(), 10);
    }

    #[test]
    fn same_seed_same_split_and_seed_matters() {
        let e = patients(20, "a");
        assert_eq!(split_folds(&e, 5, 9, 0.1).unwrap(), split_folds(&e, 5, 9, 0.1).unwrap());
        let differs = (0..10).any(|s| split_folds(&e, 5, s, 0.1).unwrap() != split_folds(&e, 5, 9, 0.1).unwrap());
        assert!(differs);
    }

    #[test]
    fn stratified_one_per_dataset() {
        let mut e = patients(5, "a");
        e.extend(patients(5, "b"));
        let split = split_folds(&e, 5, 3, 0.1).unwrap();
        for f in &split.folds {
            let datasets: BTreeSet<_> = f.test.iter().map(|p| &p[..1]).collect();
            assert_eq!(f.test.len(), 2);
            assert_eq!(datasets.len(), 2, "{f:?}");
        }
    }

    #[test]
    fn errors() {
        let mut e = patients(5, "a");
        e.extend(patients(4, "b"));
        assert!(matches!(split_folds(&e, 5, 0, 0.1), Err(Error::Split(_))));
        assert!(matches!(split_folds(&patients(5, "a"), 1, 0, 0.1), Err(Error::Split(_))));
        let mut dup = patients(5, "a");
        dup.push(dup[0].clone());
        assert!(matches!(split_folds(&dup, 5, 0, 0.1), Err(Error::Split(_))));
        let split = split_folds(&patients(5, "a"), 5, 0, 0.1).unwrap();
        assert!(matches!(split.fold(7), Err(Error::Split(_))));
    }

    proptest! {
        #[test]
        fn folds_partition_patients(na in 3usize..30, nb in 3usize..30, k in 2usize..4, seed in 0u64..500, vf in 0.0f64..0.5) {
            let mut e = patients(na, "a");
            e.extend(patients(nb, "b"));
            let split = split_folds(&e, k, seed, vf).unwrap();
            let mut tests = BTreeSet::new();
            for (i, f) in split.folds.iter().enumerate() {
                let train: BTreeSet<_> = f.train.iter().collect();
                let val: BTreeSet<_> = f.val.iter().collect();
                let test: BTreeSet<_> = f.test.iter().collect();
                prop_assert!(train.is_disjoint(&test));
                prop_assert!(val.is_disjoint(&test));
                prop_assert!(train.is_disjoint(&val));
                prop_assert_eq!(train.len() + val.len() + test.len(), na + nb);
                prop_assert!(!val.is_empty());
                for p in &f.test {
                    prop_assert_eq!(split.assignments[p], i);
                    prop_assert!(tests.insert(p.clone()));
                }
                let sizes: Vec<usize> = split.folds.iter().map(|f| f.test.len()).collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
            prop_assert_eq!(tests.len(), na + nb);
        }
    }
}
