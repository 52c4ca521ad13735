use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::evalkit::SampleKey;
use crate::rng;

pub type Pair = (String, String);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Seen,
    Unseen,
}

/// What an Unseen split withholds from training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldoutLevel {
    Pair,
    Category,
    Affordance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Holdout {
    pub level: HoldoutLevel,
    /// Units withheld; `None` takes a fifth of them (at least one).
    pub count: Option<usize>,
}

impl Default for Holdout {
    fn default() -> Self {
        Self { level: HoldoutLevel::Pair, count: None }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub mode: SplitMode,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Pairs absent from training (Unseen only).
    pub held_out: Vec<Pair>,
}

fn pair_of(k: &SampleKey) -> Pair {
    (k.category.clone(), k.affordance.clone())
}

pub fn build_splits(keys: &[SampleKey], mode: SplitMode, seed: u64) -> Result<DatasetSplit> {
    build_splits_with(keys, mode, Holdout::default(), seed)
}

pub fn build_splits_with(keys: &[SampleKey], mode: SplitMode, holdout: Holdout, seed: u64) -> Result<DatasetSplit> {
    let mut groups: BTreeMap<Pair, Vec<String>> = BTreeMap::new();
    for k in keys {
        groups.entry(pair_of(k)).or_default().push(k.id.clone());
    }
    let mut r = rng::stream(seed, "splits");
    let mut split = DatasetSplit { mode, train: Vec::new(), val: Vec::new(), test: Vec::new(), held_out: Vec::new() };
    match mode {
        SplitMode::Seen => {
            for ids in groups.values_mut() {
                ids.shuffle(&mut r);
                let n = ids.len();
                let n_train = (libm::round(0.8 * n as f64) as usize).max(1);
                let n_val = (libm::round(0.1 * n as f64) as usize).min(n - n_train);
                split.train.extend_from_slice(&ids[..n_train]);
                split.val.extend_from_slice(&ids[n_train..n_train + n_val]);
                split.test.extend_from_slice(&ids[n_train + n_val..]);
            }
        }
        SplitMode::Unseen => {
            if groups.len() < 2 {
                bail!(InfeasibleSplit, "an unseen split needs at least 2 distinct pairs, found {}", groups.len());
            }
            let held = held_pairs(&groups, holdout, &mut r)?;
            for (pair, ids) in groups.iter_mut() {
                ids.shuffle(&mut r);
                if held.contains(pair) {
                    let n_val = ids.len() / 3;
                    split.val.extend_from_slice(&ids[..n_val]);
                    split.test.extend_from_slice(&ids[n_val..]);
                } else {
                    split.train.extend_from_slice(ids);
                }
            }
            split.held_out = held.into_iter().collect();
        }
    }
    verify(&split, keys)?;
    Ok(split)
}

fn held_pairs<R: Rng>(groups: &BTreeMap<Pair, Vec<String>>, holdout: Holdout, r: &mut R) -> Result<BTreeSet<Pair>> {
    let unit = |p: &Pair| -> String {
        match holdout.level {
            HoldoutLevel::Pair => alloc::format!("{}/{}", p.0, p.1),
            HoldoutLevel::Category => p.0.clone(),
            HoldoutLevel::Affordance => p.1.clone(),
        }
    };
    let units: BTreeSet<String> = groups.keys().map(unit).collect();
    let mut units: Vec<String> = units.into_iter().collect();
    let count = holdout.count.unwrap_or_else(|| (units.len() / 5).max(1));
    if count == 0 || count >= units.len() {
        bail!(InfeasibleSplit, "cannot hold out {count} of {} {:?} units and still train", units.len(), holdout.level);
    }
    units.shuffle(r);
    let chosen: BTreeSet<String> = units.into_iter().take(count).collect();
    Ok(groups.keys().filter(|p| chosen.contains(&unit(p))).cloned().collect())
}

fn verify(split: &DatasetSplit, keys: &[SampleKey]) -> Result<()> {
    let pair: BTreeMap<&str, Pair> = keys.iter().map(|k| (k.id.as_str(), pair_of(k))).collect();
    let pairs = |ids: &[String]| -> BTreeSet<Pair> { ids.iter().map(|i| pair[i.as_str()].clone()).collect() };
    let train = pairs(&split.train);
    let test = pairs(&split.test);
    let ok = match split.mode {
        SplitMode::Seen => test.is_subset(&train),
        SplitMode::Unseen => train.is_disjoint(&test) && train.is_disjoint(&pairs(&split.val)),
    };
    if !ok {
        bail!(Contract, "{:?} split violates its pair invariant", split.mode);
    }
    if split.train.len() + split.val.len() + split.test.len() != keys.len() {
        bail!(Contract, "split does not partition the {} ids", keys.len());
    }
    Ok(())
}

/// Indices into `pool` for `K` partner clouds: without replacement when the
/// pool is large enough, otherwise with replacement.
pub fn pair_pointclouds(g_id: &str, pool_len: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if pool_len == 0 {
        bail!(Pairing, "'{g_id}'");
    }
    let mut r = rng::stream(seed ^ fnv(g_id), "pairing");
    Ok(if pool_len >= k {
        rand::seq::index::sample(&mut r, pool_len, k).into_vec()
    } else {
        (0..k).map(|_| r.random_range(0..pool_len)).collect()
    })
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}
