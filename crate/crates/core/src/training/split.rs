use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitKind {
    /// Temporal prefix/suffix split of each trajectory; indices are snapshots.
    SingleTrajectory,
    /// Split over whole trajectories; indices are dataset positions.
    MultiTrajectory,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub kind: SplitKind,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Temporal split: the first `round(fraction · len)` snapshots train, the rest test.
pub fn split_single(len: usize, train_fraction: f64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let n_train = (train_fraction * len as f64).round() as usize;
    if n_train < 2 || len - n_train.min(len) < 2 {
        return Err(Error::Split(format!(
            "{len} snapshots at fraction {train_fraction} leave {} train and {} test; each side needs 2",
            n_train.min(len),
            len.saturating_sub(n_train)
        )));
    }
    Ok(Split {
        kind: SplitKind::SingleTrajectory,
        train: (0..n_train).collect(),
        val: Vec::new(),
        test: (n_train..len).collect(),
    })
}

/// Seeded shuffle of trajectory ids followed by contiguous train/val/test slices.
pub fn split_multi(count: usize, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("fractions must be non-negative and sum to 1, got {fractions:?}")));
    }
    let mut ids: Vec<usize> = (0..count).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (fractions[0] * count as f64).round() as usize;
    let n_val = ((fractions[1] * count as f64).round() as usize).min(count - n_train.min(count));
    let n_train = n_train.min(count);
    if n_train == 0 {
        return Err(Error::Split(format!("{count} trajectories leave no training set")));
    }
    Ok(Split {
        kind: SplitKind::MultiTrajectory,
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    })
}

impl Split {
    /// Disjointness and coverage of `0..len`.
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.kind == SplitKind::SingleTrajectory && !self.val.is_empty() {
            return Err(Error::Split("a single-trajectory split has no validation set".into()));
        }
        let mut all: Vec<usize> = self.train.iter().chain(&self.val).chain(&self.test).copied().collect();
        all.sort_unstable();
        if all != (0..len).collect::<Vec<_>>() {
            return Err(Error::Split(format!("index sets must be disjoint and cover 0..{len}")));
        }
        Ok(())
    }
}
