use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DomainDataset, Role};
use crate::error::{Error, Result};

// Guards floor() against products like 0.29 * 100 = 28.999999999999996.
const FRAC_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub unlabeled_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_frac: 0.8, val_frac: 0.1, test_frac: 0.1, unlabeled_frac: 0.0, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("split fractions {fr:?} must be non-negative and sum to 1")));
        }
        if !(0.0..=1.0).contains(&self.unlabeled_frac) {
            return Err(Error::Config(format!("unlabeled fraction {} outside [0, 1]", self.unlabeled_frac)));
        }
        Ok(())
    }
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Seeded train/val/test partition. Val and test sizes are floored; the
/// remainder goes to train.
pub fn split_target(dataset: &DomainDataset, spec: &SplitSpec) -> Result<(DomainDataset, DomainDataset, DomainDataset)> {
    if dataset.role != Role::Target {
        return Err(Error::Config(format!("split_target on non-target dataset {}", dataset.name)));
    }
    spec.validate()?;
    let n = dataset.len();
    if n < 3 {
        return Err(Error::Data(format!("dataset {} has {n} samples, need at least 3", dataset.name)));
    }
    let n_val = (spec.val_frac * n as f64 + FRAC_EPS).floor() as usize;
    let n_test = (spec.test_frac * n as f64 + FRAC_EPS).floor() as usize;
    let perm = permutation(n, spec.seed);
    let mut part = vec![0u8; n];
    for &i in &perm[..n_val] {
        part[i] = 1;
    }
    for &i in &perm[n_val..n_val + n_test] {
        part[i] = 2;
    }
    let take = |k: u8, suffix: &str| DomainDataset {
        name: format!("{}-{suffix}", dataset.name),
        role: Role::Target,
        samples: dataset.samples.iter().zip(&part).filter(|(_, &p)| p == k).map(|(s, _)| s.clone()).collect(),
    };
    Ok((take(0, "train"), take(1, "val"), take(2, "test")))
}

/// Marks `round(unlabeled_frac · n)` samples as unlabeled. The selection is a
/// prefix of one seeded permutation, so larger fractions contain smaller ones.
pub fn partition_labels(train: &DomainDataset, unlabeled_frac: f64, seed: u64) -> Result<DomainDataset> {
    if train.role != Role::Target {
        return Err(Error::Config(format!("partition_labels on non-target dataset {}", train.name)));
    }
    if !(0.0..=1.0).contains(&unlabeled_frac) {
        return Err(Error::Config(format!("unlabeled fraction {unlabeled_frac} outside [0, 1]")));
    }
    let n = train.len();
    let k = (unlabeled_frac * n as f64).round() as usize;
    let mut out = train.clone();
    for s in &mut out.samples {
        s.labeled = s.mask.is_some();
    }
    for &i in &permutation(n, seed ^ 0x9e37_79b9_7f4a_7c15)[..k] {
        out.samples[i].labeled = false;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::data::{Image, Mask, Sample};
    use proptest::prelude::*;

    fn target(n: usize) -> DomainDataset {
        let samples = (0..n)
            .map(|i| Sample::new(format!("t{i:03}"), Image::filled(2, 2, 0.5), Some(Mask::zeros(2, 2)), 0).unwrap())
            .collect();
        DomainDataset::new("t", Role::Target, samples).unwrap()
    }

    fn ids(d: &DomainDataset) -> Vec<String> {
        d.samples.iter().map(|s| s.sample_id.clone()).collect()
    }

    fn unlabeled(d: &DomainDataset) -> HashSet<String> {
        d.samples.iter().filter(|s| !s.labeled).map(|s| s.sample_id.clone()).collect()
    }

    #[test]
    fn default_split_sizes() {
        let (tr, va, te) = split_target(&target(100), &SplitSpec::default()).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        let (tr, va, te) = split_target(&target(11), &SplitSpec::default()).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (9, 1, 1));
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let d = target(40);
        let a = split_target(&d, &SplitSpec::default()).unwrap();
        let b = split_target(&d, &SplitSpec::default()).unwrap();
        assert_eq!(ids(&a.1), ids(&b.1));
        let c = split_target(&d, &SplitSpec { seed: 7, ..SplitSpec::default() }).unwrap();
        assert_ne!(ids(&a.1), ids(&c.1));
    }

    #[test]
    fn split_rejects_tiny_or_source_datasets() {
        assert!(split_target(&target(2), &SplitSpec::default()).is_err());
        let mut src = target(10);
        src.role = Role::Source(1);
        assert!(split_target(&src, &SplitSpec::default()).is_err());
    }

    #[test]
    fn partition_counts() {
        let d = target(80);
        assert_eq!(partition_labels(&d, 0.0, 0).unwrap().n_unlabeled(), 0);
        assert_eq!(partition_labels(&d, 0.5, 0).unwrap().n_unlabeled(), 40);
        assert!(partition_labels(&d, 1.5, 0).is_err());
        assert!(partition_labels(&d, -0.1, 0).is_err());
    }

    #[test]
    fn partition_is_nested() {
        let d = target(80);
        let a = unlabeled(&partition_labels(&d, 0.3, 0).unwrap());
        let b = unlabeled(&partition_labels(&d, 0.6, 0).unwrap());
        assert!(a.is_subset(&b));
    }

    proptest! {
        #[test]
        fn split_is_a_disjoint_cover(n in 3usize..=50, seed in any::<u64>()) {
            let d = target(n);
            let (tr, va, te) = split_target(&d, &SplitSpec { seed, ..SplitSpec::default() }).unwrap();
            prop_assert_eq!(tr.len() + va.len() + te.len(), n);
            let mut all: Vec<String> = ids(&tr);
            all.extend(ids(&va));
            all.extend(ids(&te));
            let set: HashSet<_> = all.iter().cloned().collect();
            prop_assert_eq!(set.len(), n);
        }

        #[test]
        fn partition_nesting(seed in any::<u64>(), p in 0.0f64..0.9, dq in 0.0f64..0.5) {
            let q = (p + dq).min(1.0);
            let d = target(50);
            let a = unlabeled(&partition_labels(&d, p, seed).unwrap());
            let b = unlabeled(&partition_labels(&d, q, seed).unwrap());
            prop_assert!(a.is_subset(&b));
        }
    }
}
