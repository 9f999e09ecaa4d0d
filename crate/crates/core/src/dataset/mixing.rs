//! Multi-dataset mixing: held-out clip selection, training-mode filters and
//! the seeded interleaving of training windows.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::manifest::ClipTags;
use crate::dataset::window::{build_windows, Clip, SampleWindow};
use crate::error::{Error, Result};
use crate::rng;

pub const SINGLE_LAYER: &str = "single-layer";
pub const DOUBLE_LAYER: &str = "double-layer";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TrainMode {
    /// One random held-out clip per dataset.
    #[default]
    Rand,
    /// Train on one material per dataset, test on the others.
    Stiff,
    /// Train on double-layer structures, test on single-layer ones.
    Struc,
}

/// All harmonized clips of one dataset.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub name: String,
    pub clips: Vec<Clip>,
}

#[derive(Debug, Clone)]
pub struct TestClip {
    pub id: Arc<str>,
    pub tags: ClipTags,
    pub windows: Vec<SampleWindow>,
}

#[derive(Debug, Clone)]
pub struct MixedSplit {
    pub train: Vec<SampleWindow>,
    pub test: Vec<TestClip>,
    pub train_clips: BTreeSet<Arc<str>>,
    pub test_clips: BTreeSet<Arc<str>>,
}

impl MixedSplit {
    /// Uniform random interleaving of all training windows for one epoch.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::label("epoch"), epoch as u64]));
        order
    }

    pub fn test_windows(&self) -> impl Iterator<Item = &SampleWindow> {
        self.test.iter().flat_map(|c| c.windows.iter())
    }
}

/// Which clips of each dataset train and which test, by index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipPartition {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn partition_clips(ds: &LoadedDataset, index: usize, mode: TrainMode, seed: u64) -> Result<ClipPartition> {
    let n = ds.clips.len();
    let part = match mode {
        TrainMode::Rand => {
            if n < 2 {
                return Err(Error::config(
                    "datasets",
                    format!(
                        "dataset `{}` has {n} clip(s); it needs at least 2 to both train and test",
                        ds.name
                    ),
                ));
            }
            let held = rng::stream(seed, &[rng::label("holdout"), index as u64]).random_range(0..n);
            ClipPartition {
                train: (0..n).filter(|&i| i != held).collect(),
                test: vec![held],
            }
        }
        TrainMode::Stiff => {
            let materials: BTreeSet<&str> = ds.clips.iter().map(|c| c.tags.material.as_str()).collect();
            let train_material = materials.iter().next().copied().unwrap_or_default();
            ClipPartition {
                train: (0..n).filter(|&i| ds.clips[i].tags.material == train_material).collect(),
                test: (0..n).filter(|&i| ds.clips[i].tags.material != train_material).collect(),
            }
        }
        TrainMode::Struc => ClipPartition {
            train: (0..n).filter(|&i| ds.clips[i].tags.structure == DOUBLE_LAYER).collect(),
            test: (0..n).filter(|&i| ds.clips[i].tags.structure == SINGLE_LAYER).collect(),
        },
    };
    Ok(part)
}

/// Splits the datasets under `mode` and cuts windows. Training windows keep
/// dataset order here; [`MixedSplit::epoch_order`] interleaves them.
pub fn mix_datasets(datasets: &[LoadedDataset], mode: TrainMode, seed: u64) -> Result<MixedSplit> {
    if datasets.is_empty() {
        return Err(Error::config("datasets", "at least one dataset is required"));
    }
    let mut split = MixedSplit {
        train: Vec::new(),
        test: Vec::new(),
        train_clips: BTreeSet::new(),
        test_clips: BTreeSet::new(),
    };
    for (index, ds) in datasets.iter().enumerate() {
        let part = partition_clips(ds, index, mode, seed)?;
        for &i in &part.train {
            let clip = &ds.clips[i];
            split.train.extend(build_windows(clip)?);
            split.train_clips.insert(clip.id.clone());
        }
        for &i in &part.test {
            let clip = &ds.clips[i];
            split.test.push(TestClip {
                id: clip.id.clone(),
                tags: clip.tags.clone(),
                windows: build_windows(clip)?,
            });
            split.test_clips.insert(clip.id.clone());
        }
    }
    if split.train_clips.is_empty() || split.train.is_empty() {
        return Err(Error::config(
            "mode",
            format!("empty train partition under {mode:?} mode"),
        ));
    }
    if split.test_clips.is_empty() {
        return Err(Error::config(
            "mode",
            format!("empty test partition under {mode:?} mode"),
        ));
    }
    if let Some(id) = split.train_clips.intersection(&split.test_clips).next() {
        return Err(Error::data(format!("clip {id} is in both partitions")));
    }
    Ok(split)
}
