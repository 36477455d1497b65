//! Per-volume intensity normalization over a percentile-trimmed brain region.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{percentile_sorted, sort_floats, CompensatedSum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Modality {
    T1,
    T2,
    Flair,
}

impl Modality {
    /// Percentile window `(low, high)` of brain intensities used for the statistics.
    pub fn percentile_window(self) -> (f64, f64) {
        match self {
            Modality::T1 | Modality::T2 => (2.0, 98.0),
            Modality::Flair => (2.0, 90.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Some(Modality::T1),
            "t2" => Some(Modality::T2),
            "flair" | "fl" => Some(Modality::Flair),
            _ => None,
        }
    }
}

pub const MIN_BRAIN_VOXELS: usize = 100;

/// Statistics of the trimmed brain region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrainStats {
    pub low: f64,
    pub high: f64,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Mean and population standard deviation of brain voxels (strictly positive)
/// whose intensity lies within the modality's percentile window.
pub fn brain_stats(volume: &[f64], modality: Modality) -> Result<BrainStats> {
    let mut brain: Vec<f64> = volume.iter().copied().filter(|&v| v > 0.0).collect();
    if brain.len() < MIN_BRAIN_VOXELS {
        return Err(Error::DegenerateVolume("fewer than 100 brain voxels"));
    }
    sort_floats(&mut brain);
    let (p_lo, p_hi) = modality.percentile_window();
    let low = percentile_sorted(&brain, p_lo);
    let high = percentile_sorted(&brain, p_hi);
    let window = brain.iter().copied().filter(|&v| v >= low && v <= high);
    let mut sum = CompensatedSum::default();
    let mut count = 0usize;
    for v in window.clone() {
        sum.add(v);
        count += 1;
    }
    let mean = sum.value() / count as f64;
    let mut sq = CompensatedSum::default();
    for v in window {
        sq.add((v - mean) * (v - mean));
    }
    let std = libm::sqrt(sq.value() / count as f64);
    if !(std > 0.0) {
        return Err(Error::DegenerateVolume("brain intensities have zero spread"));
    }
    Ok(BrainStats {
        low,
        high,
        mean,
        std,
        count,
    })
}

/// `(v - mean) / std` on brain voxels; background voxels stay 0.
pub fn normalize_volume(volume: &[f64], modality: Modality) -> Result<Vec<f64>> {
    let stats = brain_stats(volume, modality)?;
    Ok(volume
        .iter()
        .map(|&v| if v > 0.0 { (v - stats.mean) / stats.std } else { 0.0 })
        .collect())
}
