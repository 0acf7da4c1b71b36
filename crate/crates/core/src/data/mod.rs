//! Interaction datasets, filtering, splitting and batching.

mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::numerics::{DenseMatrix, Rng};

pub use io::{
    load_features, read_interactions, read_split_manifest, save_features, save_features_csv,
    write_interactions, write_split_manifest, RawInteraction,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Valid => "valid",
            Self::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "valid" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            other => bail!(Format, "unknown split '{other}'"),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Warm,
    Cold,
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warm" => Ok(Self::Warm),
            "cold" => Ok(Self::Cold),
            other => bail!(Config, "unknown split mode '{other}' (warm|cold)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub mode: SplitMode,
    /// Warm mode: fraction of each user's interactions for validation and
    /// test. Cold mode: fraction of items held out for each.
    pub valid_ratio: f64,
    pub test_ratio: f64,
    pub seed: u64,
}

impl SplitConfig {
    pub fn new(mode: SplitMode, seed: u64) -> Self {
        Self {
            mode,
            valid_ratio: 0.1,
            test_ratio: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (v, t) = (self.valid_ratio, self.test_ratio);
        if !(v > 0.0 && t > 0.0 && v + t < 1.0) {
            bail!(Config, "split ratios must be positive and leave room for training (valid {v}, test {t})");
        }
        Ok(())
    }
}

/// Interactions over dense internal ids, with an optional split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// External id of each internal user.
    pub user_ids: Vec<String>,
    /// External id of each internal item (its feature row in the input).
    pub item_ids: Vec<u64>,
    /// Deduplicated `(user, item)` pairs sorted by user then item.
    pub interactions: Vec<(usize, usize)>,
    /// One entry per interaction once split.
    pub splits: Option<Vec<Split>>,
}

/// Sorts ids numerically when all of them are integers, lexically otherwise.
fn sort_ids(ids: &mut [String]) {
    if ids.iter().all(|s| s.parse::<u64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<u64>().unwrap());
    } else {
        ids.sort();
    }
}

impl Dataset {
    /// Builds a dataset from raw rows. Items keep their integer ids as dense
    /// indices into a catalog of `n_items` (defaults to the largest id + 1).
    pub fn from_raw(rows: &[RawInteraction], n_items: Option<usize>) -> Result<Self> {
        if rows.is_empty() {
            bail!(Data, "no interactions");
        }
        let max_item = rows.iter().map(|r| r.item).max().unwrap();
        let n_items = match n_items {
            Some(n) if max_item >= n as u64 => {
                bail!(Data, "item id {max_item} has no feature row (catalog has {n} items)")
            }
            Some(n) => n,
            None => usize::try_from(max_item + 1).map_err(|_| Error::Data("item id too large".into()))?,
        };
        let mut users: Vec<String> = rows.iter().map(|r| r.user.clone()).collect();
        users.sort();
        users.dedup();
        sort_ids(&mut users);
        let index: BTreeMap<&str, usize> = users.iter().enumerate().map(|(k, u)| (u.as_str(), k)).collect();

        let mut pairs: Vec<((usize, usize), Option<Split>)> = rows
            .iter()
            .map(|r| ((index[r.user.as_str()], r.item as usize), r.split))
            .collect();
        pairs.sort_by_key(|p| p.0);
        if let Some(w) = pairs.windows(2).find(|w| w[0].0 == w[1].0 && w[0].1 != w[1].1) {
            let (u, i) = w[0].0;
            bail!(Format, "interaction ({}, {i}) listed with conflicting splits", users[u]);
        }
        let before = pairs.len();
        pairs.dedup_by_key(|p| p.0);
        if pairs.len() < before {
            log::debug!("collapsed {} duplicate interactions", before - pairs.len());
        }
        let has_split = pairs.iter().filter(|p| p.1.is_some()).count();
        let splits = match has_split {
            0 => None,
            n if n == pairs.len() => Some(pairs.iter().map(|p| p.1.unwrap()).collect()),
            _ => bail!(Format, "split column present on some rows but not others"),
        };
        Ok(Self {
            user_ids: users,
            item_ids: (0..n_items as u64).collect(),
            interactions: pairs.into_iter().map(|p| p.0).collect(),
            splits,
        })
    }

    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_split(&self) -> bool {
        self.splits.is_some()
    }

    /// Pairs assigned to `split`.
    pub fn pairs(&self, split: Split) -> Result<Vec<(usize, usize)>> {
        let Some(s) = &self.splits else {
            bail!(Data, "dataset has not been split");
        };
        Ok(self
            .interactions
            .iter()
            .zip(s)
            .filter(|(_, &k)| k == split)
            .map(|(&p, _)| p)
            .collect())
    }

    /// Items per user within `split`.
    pub fn user_items(&self, split: Split) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![Vec::new(); self.n_users()];
        for (u, i) in self.pairs(split)? {
            out[u].push(i);
        }
        Ok(out)
    }

    /// Keeps only interactions in `keep` and compacts user and item ids.
    /// Returns the old index of every surviving item.
    fn compact(&self, keep: &[(usize, usize)]) -> (Self, Vec<usize>) {
        let mut users: Vec<usize> = keep.iter().map(|p| p.0).collect();
        users.sort_unstable();
        users.dedup();
        let mut items: Vec<usize> = keep.iter().map(|p| p.1).collect();
        items.sort_unstable();
        items.dedup();
        let umap: BTreeMap<usize, usize> = users.iter().enumerate().map(|(k, &u)| (u, k)).collect();
        let imap: BTreeMap<usize, usize> = items.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let mut interactions: Vec<(usize, usize)> = keep.iter().map(|&(u, i)| (umap[&u], imap[&i])).collect();
        interactions.sort_unstable();
        let ds = Self {
            user_ids: users.iter().map(|&u| self.user_ids[u].clone()).collect(),
            item_ids: items.iter().map(|&i| self.item_ids[i]).collect(),
            interactions,
            splits: None,
        };
        (ds, items)
    }

    /// Applies 5-core filtering and compacts ids. Returns the filtered
    /// dataset and, for each new item, its row in the old catalog.
    pub fn five_core(&self) -> Result<(Self, Vec<usize>)> {
        let kept = five_core_filter(&self.interactions)?;
        Ok(self.compact(&kept))
    }
}

/// Iteratively drops users and items with fewer than `k` interactions.
pub fn k_core_filter(interactions: &[(usize, usize)], k: usize) -> Vec<(usize, usize)> {
    let mut cur: Vec<(usize, usize)> = interactions.to_vec();
    cur.sort_unstable();
    cur.dedup();
    loop {
        let mut du: BTreeMap<usize, usize> = BTreeMap::new();
        let mut di: BTreeMap<usize, usize> = BTreeMap::new();
        for &(u, i) in &cur {
            *du.entry(u).or_default() += 1;
            *di.entry(i).or_default() += 1;
        }
        let before = cur.len();
        cur.retain(|(u, i)| du[u] >= k && di[i] >= k);
        if cur.len() == before {
            return cur;
        }
    }
}

pub fn five_core_filter(interactions: &[(usize, usize)]) -> Result<Vec<(usize, usize)>> {
    let out = k_core_filter(interactions, 5);
    if out.is_empty() {
        bail!(Data, "5-core filtering removed every interaction");
    }
    Ok(out)
}

/// Per-user counts `(train, valid, test)` for `n` interactions.
pub fn warm_counts(n: usize, cfg: &SplitConfig) -> (usize, usize, usize) {
    let valid = ((cfg.valid_ratio * n as f64).round() as usize).max(1);
    let test = ((cfg.test_ratio * n as f64).round() as usize).max(1);
    (n - valid - test, valid, test)
}

fn split_rng(cfg: &SplitConfig) -> Rng {
    Rng::new(cfg.seed).fork(0x5b1)
}

/// Per-user random partition with at least 3 train, 1 valid and 1 test
/// interaction per user.
pub fn warm_split(dataset: &Dataset, cfg: &SplitConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = split_rng(cfg);
    let mut splits = vec![Split::Train; dataset.interactions.len()];
    let mut start = 0;
    while start < dataset.interactions.len() {
        let u = dataset.interactions[start].0;
        let end = start + dataset.interactions[start..].iter().take_while(|p| p.0 == u).count();
        let n = end - start;
        if n < 5 {
            bail!(
                Internal,
                "user {} has {n} interactions; warm split requires 5-core filtered data",
                dataset.user_ids[u]
            );
        }
        let (_, valid, test) = warm_counts(n, cfg);
        if n - valid - test < 3 {
            bail!(Config, "split ratios leave fewer than 3 training interactions for a user with {n}");
        }
        let mut order: Vec<usize> = (start..end).collect();
        rng.shuffle(&mut order);
        for &k in &order[..test] {
            splits[k] = Split::Test;
        }
        for &k in &order[test..test + valid] {
            splits[k] = Split::Valid;
        }
        start = end;
    }
    Ok(Dataset {
        splits: Some(splits),
        ..dataset.clone()
    })
}

/// Holds out whole items: validation and test items never appear in training.
pub fn cold_split(dataset: &Dataset, cfg: &SplitConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut items: Vec<usize> = dataset.interactions.iter().map(|p| p.1).collect();
    items.sort_unstable();
    items.dedup();
    let n_valid = (cfg.valid_ratio * items.len() as f64).round() as usize;
    let n_test = (cfg.test_ratio * items.len() as f64).round() as usize;
    if n_valid == 0 || n_test == 0 || n_valid + n_test >= items.len() {
        bail!(
            Config,
            "{} interacted items are too few for a cold split ({n_valid} valid, {n_test} test)",
            items.len()
        );
    }
    let mut rng = split_rng(cfg);
    rng.shuffle(&mut items);
    let mut assign = vec![Split::Train; dataset.n_items()];
    for &i in &items[..n_valid] {
        assign[i] = Split::Valid;
    }
    for &i in &items[n_valid..n_valid + n_test] {
        assign[i] = Split::Test;
    }
    let splits = dataset.interactions.iter().map(|&(_, i)| assign[i]).collect();
    Ok(Dataset {
        splits: Some(splits),
        ..dataset.clone()
    })
}

pub fn split(dataset: &Dataset, cfg: &SplitConfig) -> Result<Dataset> {
    match cfg.mode {
        SplitMode::Warm => warm_split(dataset, cfg),
        SplitMode::Cold => cold_split(dataset, cfg),
    }
}

/// One epoch of training batches: a seeded shuffle of `pairs` cut into
/// chunks of `batch_size`; the last chunk may be shorter.
pub fn epoch_batches(pairs: &[(usize, usize)], batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<(usize, usize)>>> {
    if batch_size < 2 {
        bail!(Config, "batch size must be at least 2, got {batch_size}");
    }
    if pairs.is_empty() {
        bail!(Data, "no training interactions");
    }
    let mut order = pairs.to_vec();
    rng.shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[_]>::to_vec).collect())
}

/// Standard-normal features with the same shape as `like`.
pub fn random_features_like(like: &DenseMatrix, rng: &mut Rng) -> DenseMatrix {
    DenseMatrix::from_fn(like.rows(), like.cols(), |_, _| rng.normal())
}
