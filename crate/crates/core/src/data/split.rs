use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
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
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split {s:?} (train, val or test)")))
    }
}

/// Cluster id to split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub clusters: BTreeMap<u64, Split>,
}

impl SplitAssignment {
    pub fn split_of(&self, cluster: u64) -> Option<Split> {
        self.clusters.get(&cluster).copied()
    }

    /// Items whose cluster is assigned to `split`. Items with unknown
    /// clusters are a data error.
    pub fn select<'a, T>(&self, items: &'a [T], cluster: impl Fn(&T) -> u64, split: Split) -> Result<Vec<&'a T>> {
        let mut out = Vec::new();
        for it in items {
            let c = cluster(it);
            match self.split_of(c) {
                Some(s) if s == split => out.push(it),
                Some(_) => {}
                None => return Err(Error::data(format!("cluster {c} has no split assignment"))),
            }
        }
        Ok(out)
    }
}

/// Assigns whole clusters to splits. Clusters are visited in a seeded random
/// order and each goes to the split whose sample count falls furthest below
/// its target (ties to the earlier split).
pub fn split_by_cluster(clusters: &[u64], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if clusters.is_empty() {
        return Err(Error::data("cannot split an empty dataset"));
    }
    if ratios.iter().any(|&r| !(r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::invalid(format!("invalid split ratios {ratios:?}")));
    }
    let mut sizes: BTreeMap<u64, usize> = BTreeMap::new();
    for &c in clusters {
        *sizes.entry(c).or_default() += 1;
    }
    let total: f64 = clusters.len() as f64;
    let norm: f64 = ratios.iter().sum();
    let targets = ratios.map(|r| r / norm * total);

    let mut order: Vec<(u64, usize)> = sizes.into_iter().collect();
    RngStream::new(seed).shuffle(&mut order);
    let mut filled = [0usize; 3];
    let mut out = SplitAssignment::default();
    for (cluster, size) in order {
        let mut best = 0;
        for s in 1..3 {
            if targets[s] - filled[s] as f64 > targets[best] - filled[best] as f64 {
                best = s;
            }
        }
        filled[best] += size;
        out.clusters.insert(cluster, Split::ALL[best]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

    #[test]
    fn single_cluster_goes_to_train() {
        let a = split_by_cluster(&[7, 7, 7], RATIOS, 3).unwrap();
        assert_eq!(a.split_of(7), Some(Split::Train));
    }

    #[test]
    fn ten_equal_clusters_split_eight_one_one() {
        let clusters: Vec<u64> = (0..10).flat_map(|c| [c; 4]).collect();
        for seed in 0..50 {
            let a = split_by_cluster(&clusters, RATIOS, seed).unwrap();
            let count = |s| a.clusters.values().filter(|&&x| x == s).count();
            assert_eq!([count(Split::Train), count(Split::Val), count(Split::Test)], [8, 1, 1]);
        }
    }

    #[test]
    fn empty_rejected() {
        assert!(split_by_cluster(&[], RATIOS, 0).is_err());
    }

    #[test]
    fn select_filters_by_cluster() {
        let a = SplitAssignment { clusters: [(1, Split::Train), (2, Split::Test)].into_iter().collect() };
        let items = [(1u64, 'a'), (2, 'b'), (1, 'c')];
        let train = a.select(&items, |i| i.0, Split::Train).unwrap();
        assert_eq!(train.iter().map(|i| i.1).collect::<String>(), "ac");
        assert!(a.select(&[(3u64, 'x')], |i| i.0, Split::Val).is_err());
    }

    proptest! {
        #[test]
        fn achieved_counts_within_one_cluster_of_target(
            sizes in proptest::collection::vec(1usize..20, 1..40),
            seed in 0u64..1000,
        ) {
            let clusters: Vec<u64> = sizes.iter().enumerate().flat_map(|(c, &n)| vec![c as u64; n]).collect();
            let a = split_by_cluster(&clusters, RATIOS, seed).unwrap();
            prop_assert_eq!(a.clusters.len(), sizes.len());
            let total = clusters.len() as f64;
            let biggest = *sizes.iter().max().unwrap() as f64;
            for (k, s) in Split::ALL.into_iter().enumerate() {
                let got: usize = sizes.iter().enumerate().filter(|(c, _)| a.split_of(*c as u64) == Some(s)).map(|(_, &n)| n).sum();
                prop_assert!((got as f64 - RATIOS[k] * total).abs() <= biggest + 1e-9);
            }
        }
    }
}
