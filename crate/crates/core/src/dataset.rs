//! On-disk dataset layout: `images/NNNN.png`, `masks/NNNN.png` and a
//! `manifest.json` describing every sample and the train/val/test split.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{read_image, read_mask, BitMask, Raster};
use crate::synth::{SynthSpec, WallRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetEntry {
    pub id: String,
    pub index: usize,
    pub seed: u64,
    /// Paths relative to the dataset directory.
    pub image: String,
    pub mask: String,
    pub walls: Vec<WallRecord>,
}

/// Disjoint, sorted index sets.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Seeded 70/15/15 partition of `0..count`.
    pub fn partition(count: usize, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..count).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((count as f64 * 0.70).round() as usize).max(1).min(count);
        let n_val = ((count as f64 * 0.15).round() as usize).min(count - n_train);
        let take = |range: std::ops::Range<usize>| {
            let mut v = idx[range].to_vec();
            v.sort_unstable();
            v
        };
        Self {
            train: take(0..n_train),
            val: take(n_train..n_train + n_val),
            test: take(n_train + n_val..count),
        }
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetManifest {
    pub spec: SynthSpec,
    pub entries: Vec<DatasetEntry>,
    pub splits: Splits,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    /// Hex SHA-256 of the manifest file bytes.
    pub manifest_hash: String,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join("manifest.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::file(&path, e))?;
        let manifest = serde_json::from_slice(&bytes)?;
        Ok(Self {
            dir,
            manifest,
            manifest_hash: hex::encode(Sha256::digest(&bytes)),
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn entry(&self, index: usize) -> Result<&DatasetEntry> {
        self.manifest
            .entries
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("dataset has no sample {index}")))
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        self.manifest.splits.get(split)
    }

    /// Grayscale image and mask of sample `index`.
    pub fn load(&self, index: usize) -> Result<(Raster, BitMask)> {
        let e = self.entry(index)?;
        Ok((read_image(self.dir.join(&e.image))?, read_mask(self.dir.join(&e.mask))?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn splits_partition_indices(count in 1usize..400, seed in any::<u64>()) {
            let s = Splits::partition(count, seed);
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..count).collect::<Vec<_>>());
            prop_assert!(!s.train.is_empty());
        }
    }

    #[test]
    fn split_sizes() {
        let s = Splits::partition(200, 1);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (140, 30, 30));
        assert_eq!("val".parse::<Split>().unwrap(), Split::Val);
        assert!("dev".parse::<Split>().is_err());
    }
}
