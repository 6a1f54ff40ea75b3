//! Stratified train/val/test splitting with repeated trials.
//!
//! Each class is partitioned independently: `round(train_fraction * n)`
//! records go to train, `round(val_fraction * n)` to val, and the remainder
//! to test. Every trial reshuffles with a seed derived from the base seed
//! and the trial number, so a split is fully determined by its spec.

use super::{CellRecord, ClassLabel};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.70,
            val_fraction: 0.15,
            test_fraction: 0.15,
            trials: 5,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fracs.iter().any(|f| !f.is_finite() || *f < 0.0 || *f > 1.0) {
            return Err(Error::InvalidParameter(
                "split fractions must lie in [0, 1]".into(),
            ));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(
                "split fractions must sum to 1".into(),
            ));
        }
        if self.train_fraction == 0.0 {
            return Err(Error::InvalidParameter(
                "train fraction must be positive".into(),
            ));
        }
        if self.trials == 0 {
            return Err(Error::InvalidParameter("trials must be >= 1".into()));
        }
        Ok(())
    }
}

/// Index sets (into the source record slice) for one trial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn trial_seed(base: u64, trial: usize) -> u64 {
    base.wrapping_add((trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Split records into `spec.trials` stratified partitions. Every class
/// present must have at least 3 records; the error names the first class
/// that does not.
pub fn stratified_splits(records: &[CellRecord], spec: &SplitSpec) -> Result<Vec<TrialSplit>> {
    spec.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidInput("no records to split".into()));
    }
    let mut by_class: BTreeMap<ClassLabel, Vec<usize>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        by_class.entry(rec.label).or_default().push(i);
    }
    for (class, members) in &by_class {
        if members.len() < 3 {
            return Err(Error::Stratification(format!(
                "class {} has {} records; need at least 3 to split",
                class.short_name(),
                members.len()
            )));
        }
    }
    let mut trials = Vec::with_capacity(spec.trials);
    for t in 0..spec.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(spec.seed, t));
        let mut split = TrialSplit {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for members in by_class.values() {
            let mut pool = members.clone();
            pool.shuffle(&mut rng);
            let n = pool.len();
            let n_train = (spec.train_fraction * n as f64).round() as usize;
            let n_val =
                ((spec.val_fraction * n as f64).round() as usize).min(n.saturating_sub(n_train));
            split.train.extend(&pool[..n_train]);
            split.val.extend(&pool[n_train..n_train + n_val]);
            split.test.extend(&pool[n_train + n_val..]);
        }
        split.train.sort_unstable();
        split.val.sort_unstable();
        split.test.sort_unstable();
        trials.push(split);
    }
    Ok(trials)
}

/// Persisted form of a set of trial splits: record ids per partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub schema_version: u32,
    pub spec: SplitSpec,
    pub trials: Vec<TrialIds>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn manifest_from_splits(
    records: &[CellRecord],
    spec: &SplitSpec,
    splits: &[TrialSplit],
) -> SplitManifest {
    let ids = |ix: &[usize]| ix.iter().map(|&i| records[i].id.clone()).collect();
    SplitManifest {
        schema_version: 1,
        spec: spec.clone(),
        trials: splits
            .iter()
            .map(|s| TrialIds {
                train: ids(&s.train),
                val: ids(&s.val),
                test: ids(&s.test),
            })
            .collect(),
    }
}

/// Map a manifest back onto a record list by id. Unknown ids are an error,
/// so a manifest can only be replayed against the dataset it came from.
pub fn resolve_manifest(records: &[CellRecord], manifest: &SplitManifest) -> Result<Vec<TrialSplit>> {
    let index: BTreeMap<&str, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let resolve = |ids: &[String]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::NotFound(format!("record id {id} not in dataset")))
            })
            .collect()
    };
    manifest
        .trials
        .iter()
        .map(|t| {
            Ok(TrialSplit {
                train: resolve(&t.train)?,
                val: resolve(&t.val)?,
                test: resolve(&t.test)?,
            })
        })
        .collect()
}
