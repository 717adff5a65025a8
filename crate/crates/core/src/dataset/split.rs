//! Train / validation / test partitioning.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Shuffles `ids` with `seed` and cuts them into train, val and test lists.
pub fn split_ids(ids: &[String], sizes: SplitSizes, seed: u64) -> Result<[Vec<String>; 3]> {
    if sizes.total() != ids.len() {
        return Err(Error::Config(format!(
            "split sizes {}+{}+{} do not add up to {} samples",
            sizes.train,
            sizes.val,
            sizes.test,
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(sizes.train + sizes.val);
    let val = shuffled.split_off(sizes.train);
    Ok([shuffled, val, test])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:05}")).collect()
    }

    #[test]
    fn sizes_and_disjointness() {
        let all = ids(1000);
        let [tr, va, te] = split_ids(&all, SplitSizes { train: 800, val: 100, test: 100 }, 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (800, 100, 100));
        let union: HashSet<_> = tr.iter().chain(&va).chain(&te).cloned().collect();
        assert_eq!(union.len(), 1000);
        assert_eq!(union, all.into_iter().collect());
    }

    #[test]
    fn sum_mismatch_is_config_error() {
        let r = split_ids(&ids(1000), SplitSizes { train: 800, val: 100, test: 200 }, 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn split_names_parse() {
        for s in Split::ALL {
            assert_eq!(s.name().parse::<Split>().unwrap(), s);
        }
        assert!("dev".parse::<Split>().is_err());
    }
}
