//! Scan-level cross-validation partitions.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FOLD_COUNT: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub test: Vec<String>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_count: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Shuffles the scans under `seed` and cuts them into `fold_count`
/// contiguous subsets whose sizes differ by at most one (the first
/// `n % fold_count` subsets take the extra scan). For fold `f` the test set
/// is subset `f`; validation is `floor(remainder / 10)` scans drawn from the
/// remainder with a generator keyed by `(seed, f)`; training is the rest.
/// All lists are stored sorted.
pub fn build_folds(scan_ids: &[String], fold_count: usize, seed: u64) -> Result<FoldPlan> {
    if fold_count == 0 {
        return Err(Error::InvalidValue("fold count must be positive".into()));
    }
    let unique: BTreeSet<&String> = scan_ids.iter().collect();
    if unique.len() != scan_ids.len() {
        return Err(Error::InvalidValue("scan ids must be unique".into()));
    }
    if scan_ids.len() < fold_count {
        return Err(Error::TooFewScans {
            needed: fold_count,
            got: scan_ids.len(),
        });
    }
    let mut order: Vec<String> = unique.into_iter().cloned().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = order.len();
    let (base, extra) = (n / fold_count, n % fold_count);
    let mut bounds = Vec::with_capacity(fold_count + 1);
    bounds.push(0);
    for f in 0..fold_count {
        bounds.push(bounds[f] + base + usize::from(f < extra));
    }

    let folds = (0..fold_count)
        .map(|f| {
            let mut test = order[bounds[f]..bounds[f + 1]].to_vec();
            let mut rest: Vec<String> = order[..bounds[f]]
                .iter()
                .chain(&order[bounds[f + 1]..])
                .cloned()
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(f as u64 + 1);
            rest.shuffle(&mut rng);
            let n_val = rest.len() / 10;
            let mut train = rest.split_off(n_val);
            let mut validation = rest;
            test.sort();
            train.sort();
            validation.sort();
            Fold {
                test,
                train,
                validation,
            }
        })
        .collect();
    Ok(FoldPlan {
        fold_count,
        seed,
        folds,
    })
}

impl FoldPlan {
    pub fn fold(&self, f: usize) -> Result<&Fold> {
        self.folds.get(f).ok_or_else(|| {
            Error::InvalidValue(format!("fold {f} out of range 0..{}", self.fold_count))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fold plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidValue(format!("fold plan: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::volume::write_file(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
