//! Axial slice selection and subject splitting.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// First candidate axial slice (inclusive).
pub const FIRST_SLICE: usize = 70;
/// Last candidate axial slice (inclusive).
pub const LAST_SLICE: usize = 90;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Slice indices to keep for one subject, given the anomaly pixel count of
/// every axial slice of its label volume.
///
/// Train keeps every anomaly-free slice in 70..=90. Val/test keep the single
/// slice in that range with the largest anomaly area (lowest index on ties),
/// or nothing when the whole range is anomaly-free.
pub fn select_slices(anomaly_pixels: &[usize], split: Split) -> Result<Vec<usize>> {
    if anomaly_pixels.len() <= LAST_SLICE {
        return Err(Error::TooFewSlices {
            depth: anomaly_pixels.len(),
            required: LAST_SLICE + 1,
        });
    }
    let range = FIRST_SLICE..=LAST_SLICE;
    Ok(match split {
        Split::Train => range.filter(|&z| anomaly_pixels[z] == 0).collect(),
        Split::Val | Split::Test => {
            let mut best: Option<(usize, usize)> = None;
            for z in range {
                let n = anomaly_pixels[z];
                if n > 0 && best.map_or(true, |(_, bn)| n > bn) {
                    best = Some((z, n));
                }
            }
            best.map(|(z, _)| z).into_iter().collect()
        }
    })
}

/// Deterministic 80/10/10 partition of subject ids. Validation and test each
/// receive `round(n / 10)` subjects, the rest go to training.
pub fn split_subjects<T: Clone + Ord>(ids: &[T], seed: u64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let n = sorted.len();
    let n_hold = (n + 5) / 10;
    let test = sorted.split_off(n - n_hold);
    let val = sorted.split_off(n - 2 * n_hold);
    (sorted, val, test)
}
