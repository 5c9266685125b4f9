use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labeled-to-unlabeled ratio `1:k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LabelRatio {
    pub unlabeled_per_labeled: u32,
}

impl LabelRatio {
    pub const ONE_TO_TWO: Self = Self { unlabeled_per_labeled: 2 };
    pub const ONE_TO_FIVE: Self = Self { unlabeled_per_labeled: 5 };
    pub const ONE_TO_TEN: Self = Self { unlabeled_per_labeled: 10 };

    pub fn new(k: u32) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("ratio 1:0 leaves no unlabeled data".into()));
        }
        Ok(Self { unlabeled_per_labeled: k })
    }

    /// One of 1:2, 1:5, 1:10.
    pub fn is_standard(self) -> bool {
        matches!(self.unlabeled_per_labeled, 2 | 5 | 10)
    }

    /// Labeled count for a training pool of `train` patches.
    pub fn labeled_count(self, train: usize) -> usize {
        let k = self.unlabeled_per_labeled as f64;
        ((train as f64 / (1.0 + k)).round() as usize).max(1)
    }
}

impl fmt::Display for LabelRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "1:{}", self.unlabeled_per_labeled)
    }
}

impl FromStr for LabelRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("ratio must look like 1:k, got {s:?}"));
        let (a, b) = s.trim().split_once(':').ok_or_else(bad)?;
        if a.trim() != "1" {
            return Err(bad());
        }
        Self::new(b.trim().parse().map_err(|_| bad())?)
    }
}

impl TryFrom<String> for LabelRatio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LabelRatio> for String {
    fn from(r: LabelRatio) -> String {
        r.to_string()
    }
}

/// Disjoint index sets over one patch collection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub ratio: LabelRatio,
}

impl DatasetSplit {
    pub fn all(&self) -> impl Iterator<Item = &usize> {
        self.labeled.iter().chain(&self.unlabeled).chain(&self.val).chain(&self.test)
    }

    pub fn by_name(&self, name: &str) -> Option<&[usize]> {
        match name {
            "labeled" => Some(&self.labeled),
            "unlabeled" => Some(&self.unlabeled),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn is_partition(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.all().all(|i| seen.insert(*i))
    }
}

/// Random split of `n` patches: `val_frac` and `test_frac` of them are held
/// out, the rest is divided labeled:unlabeled by `ratio`.
pub fn split_dataset(n: usize, ratio: LabelRatio, val_frac: f64, test_frac: f64, seed: u64) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&val_frac) || !(0.0..1.0).contains(&test_frac) || val_frac + test_frac >= 1.0 {
        return Err(Error::Config(format!("invalid holdout fractions {val_frac}, {test_frac}")));
    }
    let val = (n as f64 * val_frac).round() as usize;
    let test = (n as f64 * test_frac).round() as usize;
    let train = n.checked_sub(val + test).ok_or_else(|| Error::InsufficientData(format!("{n} patches")))?;
    split_counts(train, val, test, ratio, seed)
}

/// Random split of `train + val + test` patches with explicit holdout sizes.
pub fn split_counts(train: usize, val: usize, test: usize, ratio: LabelRatio, seed: u64) -> Result<DatasetSplit> {
    let labeled = ratio.labeled_count(train);
    if val == 0 || test == 0 || labeled >= train {
        return Err(Error::InsufficientData(format!(
            "train={train} val={val} test={test} at ratio {ratio} leaves an empty set"
        )));
    }
    let mut order: Vec<usize> = (0..train + val + test).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| {
        let mut v = order[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(DatasetSplit {
        val: take(0..val),
        test: take(val..val + test),
        labeled: take(val + test..val + test + labeled),
        unlabeled: take(val + test + labeled..order.len()),
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_to_ten_of_660() {
        let s = split_counts(660, 100, 150, LabelRatio::ONE_TO_TEN, 1).unwrap();
        assert_eq!((s.labeled.len(), s.unlabeled.len(), s.val.len(), s.test.len()), (60, 600, 100, 150));
    }

    #[test]
    fn one_to_two_of_600() {
        let s = split_counts(600, 10, 10, LabelRatio::ONE_TO_TWO, 1).unwrap();
        assert_eq!((s.labeled.len(), s.unlabeled.len()), (200, 400));
    }

    #[test]
    fn partition_covers_everything() {
        let s = split_counts(600, 100, 150, LabelRatio::ONE_TO_FIVE, 3).unwrap();
        assert!(s.is_partition());
        let mut all: Vec<usize> = s.all().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..850).collect::<Vec<_>>());
    }

    #[test]
    fn fractions_and_idempotence() {
        let a = split_dataset(850, LabelRatio::ONE_TO_TEN, 100.0 / 850.0, 150.0 / 850.0, 9).unwrap();
        let b = split_dataset(850, LabelRatio::ONE_TO_TEN, 100.0 / 850.0, 150.0 / 850.0, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.val.len(), a.test.len(), a.labeled.len(), a.unlabeled.len()), (100, 150, 55, 545));
        let c = split_dataset(850, LabelRatio::ONE_TO_TEN, 100.0 / 850.0, 150.0 / 850.0, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn insufficient_data() {
        assert!(matches!(split_counts(1, 1, 1, LabelRatio::ONE_TO_TWO, 0), Err(Error::InsufficientData(_))));
        assert!(matches!(split_counts(30, 0, 1, LabelRatio::ONE_TO_TWO, 0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("1:10".parse::<LabelRatio>().unwrap(), LabelRatio::ONE_TO_TEN);
        assert_eq!(" 1 : 5 ".parse::<LabelRatio>().unwrap(), LabelRatio::ONE_TO_FIVE);
        assert!("2:5".parse::<LabelRatio>().is_err());
        assert!("1:0".parse::<LabelRatio>().is_err());
        assert!(!"1:3".parse::<LabelRatio>().unwrap().is_standard());
        assert_eq!(LabelRatio::ONE_TO_TWO.to_string(), "1:2");
    }
}
