use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetSource;
use crate::error::{Error, IoContext, Result};

const SPLIT_STREAM: u64 = 0x5350_4c49_5400_0001;
const PARTITION_STREAM: u64 = 0x5350_4c49_5400_0002;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Train/val/test index lists in the global example id space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
    pub checksum: String,
}

impl SplitIndex {
    /// Keeps the first `train` training and `val` validation ids. Both lists
    /// are already shuffled, so prefixes are random subsets.
    pub fn subset(&self, train: usize, val: usize) -> Result<Self> {
        if train == 0 || val == 0 || train > self.train_idx.len() || val > self.val_idx.len() {
            return Err(Error::invalid(format!(
                "subset ({train}, {val}) outside split sizes ({}, {})",
                self.train_idx.len(),
                self.val_idx.len()
            )));
        }
        Ok(Self {
            train_idx: self.train_idx[..train].to_vec(),
            val_idx: self.val_idx[..val].to_vec(),
            test_idx: self.test_idx.clone(),
            seed: self.seed,
            checksum: self.checksum.clone(),
        })
    }
}

/// Shuffles the official training set with `seed` and carves off one fifth
/// as validation; the official test set is kept as test. For CIFAR-10 this
/// yields 40000 / 10000 / 10000.
pub fn make_splits(source: &DatasetSource, seed: u64) -> Result<SplitIndex> {
    let n = source.train_count();
    if n < 5 {
        return Err(Error::invalid(format!("cannot split {n} training examples")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(seed, SPLIT_STREAM));
    let val_len = n / 5;
    let val_idx = perm.split_off(n - val_len);
    Ok(SplitIndex {
        train_idx: perm,
        val_idx,
        test_idx: (n..source.len()).collect(),
        seed,
        checksum: source.checksum.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPartition {
    pub labeled_idx: Vec<usize>,
    pub unlabeled_idx: Vec<usize>,
    pub fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

/// Per-class labeled counts for `seats` picks out of classes of the given
/// sizes, assigned one seat at a time with the quota method.
///
/// Every prefix stays within the floor/ceiling of its exact proportional
/// share, and counts only ever grow with `seats`, which is what makes
/// partitions at increasing fractions nest.
fn quota_counts(sizes: &[usize], seats: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let mut alloc = vec![0usize; sizes.len()];
    for h in 1..=seats {
        let mut best: Option<usize> = None;
        for (c, &n) in sizes.iter().enumerate() {
            // eligible iff alloc < h * n / total
            if (alloc[c] as u128) * (total as u128) >= (h as u128) * (n as u128) {
                continue;
            }
            best = match best {
                None => Some(c),
                // largest n / (alloc + 1); lower index wins ties
                Some(b) if (n as u128) * (alloc[b] as u128 + 1) > (sizes[b] as u128) * (alloc[c] as u128 + 1) => Some(c),
                keep => keep,
            };
        }
        let c = best.expect("quota method always has an eligible class");
        alloc[c] += 1;
    }
    alloc
}

/// Splits `split.train_idx` into labeled and unlabeled ids.
///
/// `round(fraction * |train|)` ids are labeled. With `stratified`, per-class
/// labeled counts track `fraction` times the class size; for a fixed seed the
/// labeled set at a smaller fraction is a subset of the one at a larger
/// fraction in both modes.
pub fn partition_labels(
    source: &DatasetSource,
    split: &SplitIndex,
    fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<LabeledPartition> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("label fraction must be in (0, 1], got {fraction}")));
    }
    let n = split.train_idx.len();
    if n == 0 {
        return Err(Error::invalid("empty training split"));
    }
    let seats = (fraction * n as f64).round() as usize;
    let mut rng = rng_for(seed, PARTITION_STREAM);
    let chosen: HashSet<usize> = if stratified {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); source.num_classes];
        for &i in &split.train_idx {
            by_class[source.label(i)].push(i);
        }
        for members in by_class.iter_mut() {
            members.shuffle(&mut rng);
        }
        let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
        let counts = quota_counts(&sizes, seats);
        by_class
            .iter()
            .zip(&counts)
            .flat_map(|(m, &k)| m[..k].iter().copied())
            .collect()
    } else {
        let mut order = split.train_idx.clone();
        order.shuffle(&mut rng);
        order.truncate(seats);
        order.into_iter().collect()
    };
    let (labeled_idx, unlabeled_idx) = split.train_idx.iter().partition(|i| chosen.contains(i));
    Ok(LabeledPartition {
        labeled_idx,
        unlabeled_idx,
        fraction,
        seed,
        stratified,
    })
}

/// Replayable record of a split and (optionally) its labeled partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub checksum: String,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub fraction: Option<f64>,
    pub labeled_idx: Option<Vec<usize>>,
}

impl SplitManifest {
    pub fn new(split: &SplitIndex, partition: Option<&LabeledPartition>) -> Self {
        Self {
            seed: split.seed,
            checksum: split.checksum.clone(),
            train_idx: split.train_idx.clone(),
            val_idx: split.val_idx.clone(),
            test_idx: split.test_idx.clone(),
            fraction: partition.map(|p| p.fraction),
            labeled_idx: partition.map(|p| p.labeled_idx.clone()),
        }
    }

    pub fn split(&self) -> SplitIndex {
        SplitIndex {
            train_idx: self.train_idx.clone(),
            val_idx: self.val_idx.clone(),
            test_idx: self.test_idx.clone(),
            seed: self.seed,
            checksum: self.checksum.clone(),
        }
    }

    /// Rebuilds the partition; unlabeled ids are the train ids not labeled.
    pub fn partition(&self) -> Option<LabeledPartition> {
        let labeled = self.labeled_idx.as_ref()?;
        let set: HashSet<usize> = labeled.iter().copied().collect();
        Some(LabeledPartition {
            labeled_idx: labeled.clone(),
            unlabeled_idx: self.train_idx.iter().copied().filter(|i| !set.contains(i)).collect(),
            fraction: self.fraction.unwrap_or(labeled.len() as f64 / self.train_idx.len().max(1) as f64),
            seed: self.seed,
            stratified: false,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_vec(self)?).at(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).at(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::IMAGE_BYTES;
    use proptest::prelude::*;

    fn source(train: usize, test: usize) -> DatasetSource {
        let labels: Vec<u8> = (0..train).map(|i| ((i * 7 + i / 3) % 10) as u8).collect();
        let test_labels: Vec<u8> = (0..test).map(|i| (i % 10) as u8).collect();
        DatasetSource::from_parts(vec![0; train * IMAGE_BYTES], labels, vec![0; test * IMAGE_BYTES], test_labels)
            .unwrap()
    }

    #[test]
    fn quota_counts_small_cases() {
        assert_eq!(quota_counts(&[5, 5], 0), vec![0, 0]);
        assert_eq!(quota_counts(&[5, 5], 10), vec![5, 5]);
        assert_eq!(quota_counts(&[3, 1], 2).iter().sum::<usize>(), 2);
        let c = quota_counts(&[7, 2, 1], 5);
        assert_eq!(c.iter().sum::<usize>(), 5);
    }

    #[test]
    fn seeds_give_different_splits() {
        let s = source(500, 100);
        let a = make_splits(&s, 0).unwrap();
        let b = make_splits(&s, 1).unwrap();
        let sa: HashSet<_> = a.train_idx.iter().collect();
        let sb: HashSet<_> = b.train_idx.iter().collect();
        assert_ne!(sa, sb);
        assert_eq!(a, make_splits(&s, 0).unwrap());
        assert_eq!((a.train_idx.len(), a.val_idx.len(), a.test_idx.len()), (400, 100, 100));
    }

    #[test]
    fn fraction_out_of_range() {
        let s = source(100, 10);
        let split = make_splits(&s, 0).unwrap();
        for f in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(partition_labels(&s, &split, f, 0, true).is_err());
        }
    }

    #[test]
    fn full_fraction_labels_everything() {
        let s = source(100, 10);
        let split = make_splits(&s, 0).unwrap();
        let p = partition_labels(&s, &split, 1.0, 3, true).unwrap();
        assert_eq!(p.labeled_idx.len(), 80);
        assert!(p.unlabeled_idx.is_empty());
    }

    #[test]
    fn manifest_roundtrip() {
        let s = source(100, 10);
        let split = make_splits(&s, 2).unwrap();
        let p = partition_labels(&s, &split, 0.25, 2, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        SplitManifest::new(&split, Some(&p)).save(&path).unwrap();
        let m = SplitManifest::load(&path).unwrap();
        assert_eq!(m.split(), split);
        let q = m.partition().unwrap();
        assert_eq!(q.labeled_idx, p.labeled_idx);
        assert_eq!(q.unlabeled_idx, p.unlabeled_idx);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn partition_invariants(n in 50usize..400, f1 in 0.01f64..1.0, f2 in 0.01f64..1.0, seed in 0u64..1000, strat: bool) {
            let s = source(n, 10);
            let split = make_splits(&s, seed).unwrap();
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let a = partition_labels(&s, &split, lo, seed, strat).unwrap();
            let b = partition_labels(&s, &split, hi, seed, strat).unwrap();
            let train: HashSet<usize> = split.train_idx.iter().copied().collect();
            let la: HashSet<usize> = a.labeled_idx.iter().copied().collect();
            let ua: HashSet<usize> = a.unlabeled_idx.iter().copied().collect();
            prop_assert!(la.is_disjoint(&ua));
            prop_assert_eq!(la.union(&ua).copied().collect::<HashSet<_>>(), train.clone());
            prop_assert_eq!(a.labeled_idx.len(), (lo * split.train_idx.len() as f64).round() as usize);
            let lb: HashSet<usize> = b.labeled_idx.iter().copied().collect();
            prop_assert!(la.is_subset(&lb));
            for id in split.val_idx.iter().chain(&split.test_idx) {
                prop_assert!(!la.contains(id) && !ua.contains(id));
            }
            if strat {
                let nt = split.train_idx.len() as f64;
                for c in 0..10 {
                    let class_n = split.train_idx.iter().filter(|&&i| s.label(i) == c).count() as f64;
                    let got = a.labeled_idx.iter().filter(|&&i| s.label(i) == c).count() as f64;
                    // rounding the seat count shifts each class share by at most 0.5 * class_n / n
                    prop_assert!((got - lo * class_n).abs() <= 1.0 + 0.5 * class_n / nt + 1e-9);
                }
            }
        }
    }
}
