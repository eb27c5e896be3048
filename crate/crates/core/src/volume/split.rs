use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    /// One path per modality, in `Modality` order.
    pub volumes: Vec<PathBuf>,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bucket {
    Train,
    Val,
    Test,
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bucket::Train => "train",
            Bucket::Val => "val",
            Bucket::Test => "test",
        })
    }
}

impl FromStr for Bucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Bucket::Train),
            "val" => Ok(Bucket::Val),
            "test" => Ok(Bucket::Test),
            other => Err(Error::Format(format!("unknown split bucket {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<CaseRecord>,
    pub val: Vec<CaseRecord>,
    pub test: Vec<CaseRecord>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn manifest_entries(&self) -> Vec<(String, Bucket)> {
        let mut v = Vec::new();
        for (bucket, cases) in [
            (Bucket::Train, &self.train),
            (Bucket::Val, &self.val),
            (Bucket::Test, &self.test),
        ] {
            v.extend(cases.iter().map(|c| (c.case_id.clone(), bucket)));
        }
        v
    }
}

/// Bucket sizes for `n` cases: validation and test get the nearest integer
/// share (at least one when their ratio is nonzero); training takes the rest.
fn bucket_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ratios.iter().all(|&r| r == 0.0) {
        return Err(Error::Parameter(format!("invalid split ratios {ratios:?}")));
    }
    let nonzero = ratios.iter().filter(|&&r| r > 0.0).count();
    if n < nonzero {
        return Err(Error::Size(format!(
            "{n} cases cannot fill {nonzero} nonempty buckets"
        )));
    }
    let total: f64 = ratios.iter().sum();
    let share = |r: f64| -> usize {
        if r == 0.0 {
            0
        } else {
            ((n as f64 * r / total).round() as usize).max(1)
        }
    };
    let (val, test) = (share(ratios[1]), share(ratios[2]));
    let train_min = usize::from(ratios[0] > 0.0);
    if val + test + train_min > n {
        return Err(Error::Size(format!(
            "{n} cases too few for ratios {ratios:?}"
        )));
    }
    let train = if ratios[0] > 0.0 { n - val - test } else { 0 };
    if train + val + test != n {
        return Err(Error::Size(format!(
            "ratios {ratios:?} leave cases unassigned"
        )));
    }
    Ok([train, val, test])
}

/// Seeded shuffle followed by contiguous train/val/test allocation.
pub fn split_dataset(cases: &[CaseRecord], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if cases.is_empty() {
        return Err(Error::Size("no cases to split".into()));
    }
    let [train, val, _] = bucket_sizes(cases.len(), ratios)?;
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |r: std::ops::Range<usize>| -> Vec<CaseRecord> {
        order[r].iter().map(|&i| cases[i].clone()).collect()
    };
    Ok(DatasetSplit {
        train: pick(0..train),
        val: pick(train..train + val),
        test: pick(train + val..cases.len()),
    })
}

pub fn write_manifest(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut s = String::new();
    for (id, b) in split.manifest_entries() {
        s.push_str(&format!("{id}\t{b}\n"));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, Bucket)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (id, b) = l
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("manifest line {l:?} lacks a tab")))?;
            Ok((id.to_string(), b.parse()?))
        })
        .collect()
}
