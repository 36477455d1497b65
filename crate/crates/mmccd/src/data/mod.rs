//! Dataset assembly: the synthetic phantom, BraTS-style ingestion and the
//! on-disk dataset format.

pub mod brats;
pub mod nifti;
pub mod pfm;
pub mod store;

use std::path::Path;

use mmccd_core::phantom::{generate_phantom, PhantomSpec, SlicePair};
use mmccd_core::resample::{resample_bilinear, resample_nearest};
use mmccd_core::slices::Split;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("unexpected input layout: {0}")]
    Layout(String),
    #[error("{0}: {1}")]
    Core(String, mmccd_core::Error),
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source }
    }
}

/// Slices per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 400,
            val: 40,
            test: 80,
        }
    }
}

/// Slices of all three splits, in split order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<SlicePair>,
    pub val: Vec<SlicePair>,
    pub test: Vec<SlicePair>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SlicePair] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &SlicePair> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Resamples both modalities bilinearly and the anomaly mask by nearest
/// neighbour.
pub fn resample_pair(pair: &SlicePair, size: usize) -> mmccd_core::Result<SlicePair> {
    Ok(SlicePair {
        x: resample_bilinear(&pair.x, size)?,
        y: resample_bilinear(&pair.y, size)?,
        anomaly: resample_nearest(&pair.anomaly, size)?,
        ..pair.clone()
    })
}

/// Generates the phantom at `spec.size` and resamples it to `resolution`.
/// Resampling can erase a tiny anomaly; such slices are dropped from
/// val/test with a warning.
pub fn phantom_dataset(spec: &PhantomSpec, counts: SplitCounts, resolution: usize) -> mmccd_core::Result<Dataset> {
    let build = |split: Split, n: usize| -> mmccd_core::Result<Vec<SlicePair>> {
        let mut out = Vec::with_capacity(n);
        for pair in generate_phantom(spec, n, split)? {
            let pair = if resolution == spec.size { pair } else { resample_pair(&pair, resolution)? };
            if split != Split::Train && pair.mode.is_some() && pair.anomaly.is_empty_set() {
                log::warn!("{} lost its anomaly at {resolution}px; skipped", pair.subject_id);
                continue;
            }
            out.push(pair);
        }
        Ok(out)
    };
    Ok(Dataset {
        train: build(Split::Train, counts.train)?,
        val: build(Split::Val, counts.val)?,
        test: build(Split::Test, counts.test)?,
    })
}
