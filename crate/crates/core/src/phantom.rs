//! Synthetic registered two-modality phantom with known anomaly masks.
//!
//! Each slice is a zero background, a head ellipse filled with a base tissue
//! class, inner tissue structures and per-pixel Gaussian texture. Inner
//! structures come from a fixed anatomical template (as after atlas
//! registration): every slice shows a random subset of the template slots
//! with jittered position, size and orientation. A tissue class is a fixed
//! pair of intensities, one per modality, so the cross-modality mapping is a
//! per-class intensity relation. Anomalous slices carry one small ellipse in
//! the base tissue: either a tissue never seen in training (`Distinct`) or one
//! that copies a normal class in the input modality but not in the target
//! modality (`Camouflage`).

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::slices::Split;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TissueClass {
    pub intensity_x: f64,
    pub intensity_y: f64,
}

impl TissueClass {
    pub const fn new(intensity_x: f64, intensity_y: f64) -> Self {
        Self {
            intensity_x,
            intensity_y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AnomalyMode {
    Distinct,
    Camouflage,
}

/// One slot of the anatomical template.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Structure {
    /// Index into the tissue classes.
    pub class: usize,
    /// Centre offset `(row, col)` from the head centre in head semi-axes.
    pub offset: (f64, f64),
    /// Semi-axis ranges `(row, col)` as fractions of the image size.
    pub radius: ((f64, f64), (f64, f64)),
    /// Orientation in radians.
    pub angle: f64,
}

impl Structure {
    pub const fn new(class: usize, offset: (f64, f64), radius: ((f64, f64), (f64, f64)), angle: f64) -> Self {
        Self {
            class,
            offset,
            radius,
            angle,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PhantomSpec {
    /// Output side length in pixels.
    pub size: usize,
    /// Normal tissue classes.
    pub classes: Vec<TissueClass>,
    /// Index into `classes` of the tissue filling the head ellipse.
    pub base_class: usize,
    /// Inclusive range of tissue regions per slice, head included.
    pub regions: (usize, usize),
    /// Head semi-axis range as a fraction of `size`.
    pub head_radius: (f64, f64),
    /// Inner structure template; slices draw `regions - 1` distinct slots.
    pub structures: Vec<Structure>,
    /// Maximum displacement of structure centres as a fraction of `size`.
    pub jitter: f64,
    /// Anomaly semi-axis range as a fraction of `size`.
    pub anomaly_radius: (f64, f64),
    /// Standard deviation of the texture noise, shared by both modalities.
    pub noise_sigma: f64,
    /// Anomaly modes used for val/test slices, assigned round-robin.
    pub anomaly_modes: Vec<AnomalyMode>,
    /// Intensities of the unseen tissue in `Distinct` mode.
    pub distinct: TissueClass,
    /// Target-modality offset of a camouflage anomaly from its matched class.
    pub camouflage_offset_y: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 128,
            classes: Vec::from([
                TissueClass::new(0.2, 0.765),
                TissueClass::new(0.45, 0.488),
                TissueClass::new(0.7, 0.236),
                TissueClass::new(0.9, 0.063),
            ]),
            base_class: 0,
            regions: (3, 6),
            head_radius: (0.415, 0.425),
            structures: Vec::from([
                Structure::new(3, (-0.3, -0.2), ((0.10, 0.12), (0.045, 0.055)), 0.35),
                Structure::new(3, (-0.3, 0.2), ((0.10, 0.12), (0.045, 0.055)), -0.35),
                Structure::new(2, (0.15, 0.0), ((0.06, 0.07), (0.06, 0.07)), 0.0),
                Structure::new(1, (0.45, -0.45), ((0.07, 0.08), (0.10, 0.11)), 0.6),
                Structure::new(1, (0.45, 0.45), ((0.07, 0.08), (0.10, 0.11)), -0.6),
            ]),
            jitter: 0.015,
            anomaly_radius: (0.08, 0.11),
            noise_sigma: 0.02,
            anomaly_modes: Vec::from([AnomalyMode::Distinct, AnomalyMode::Camouflage]),
            distinct: TissueClass::new(0.575, 1.0),
            camouflage_offset_y: 0.6,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::InvalidPhantom("size must be at least 8"));
        }
        if self.classes.is_empty() || self.base_class >= self.classes.len() {
            return Err(Error::InvalidPhantom("base class must index a tissue class"));
        }
        for (i, a) in self.classes.iter().enumerate() {
            if !(a.intensity_x.is_finite() && a.intensity_y.is_finite()) {
                return Err(Error::InvalidPhantom("class intensities must be finite"));
            }
            for b in &self.classes[i + 1..] {
                if a.intensity_x == b.intensity_x || a.intensity_y == b.intensity_y {
                    return Err(Error::InvalidPhantom("normal class mapping is not injective"));
                }
            }
        }
        let (lo, hi) = self.regions;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidPhantom("region count range is empty"));
        }
        if hi - 1 > self.structures.len() {
            return Err(Error::InvalidPhantom("more regions requested than template slots"));
        }
        if self.structures.iter().any(|s| s.class >= self.classes.len()) {
            return Err(Error::InvalidPhantom("structure class out of range"));
        }
        let mut ranges = Vec::from([self.head_radius, self.anomaly_radius]);
        ranges.extend(self.structures.iter().flat_map(|s| [s.radius.0, s.radius.1]));
        for (a, b) in ranges {
            if !(a > 0.0 && a <= b) {
                return Err(Error::InvalidPhantom("radius ranges must be positive and ordered"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.jitter >= 0.0) {
            return Err(Error::InvalidPhantom("noise sigma and jitter must be non-negative"));
        }
        if self.anomaly_modes.contains(&AnomalyMode::Camouflage) {
            if self.classes.len() < 2 {
                return Err(Error::InvalidPhantom("camouflage needs two tissue classes"));
            }
            if self.camouflage_offset_y == 0.0 {
                return Err(Error::InvalidPhantom("camouflage must change the target modality"));
            }
        }
        if self.anomaly_modes.contains(&AnomalyMode::Distinct)
            && self.classes.iter().any(|c| c.intensity_x == self.distinct.intensity_x)
        {
            return Err(Error::InvalidPhantom("distinct anomaly reuses a normal intensity"));
        }
        Ok(())
    }
}

/// Registered slice pair with its anomaly ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    pub x: Image,
    pub y: Image,
    pub anomaly: BinaryMask,
    pub subject_id: String,
    pub slice_index: usize,
    pub split: Split,
    /// Anomaly mode, when the slice carries one.
    pub mode: Option<AnomalyMode>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, r: f64, c: f64) -> bool {
        let dy = r - self.cy;
        let dx = c - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx) * (u / self.rx) + (v / self.ry) * (v / self.ry) <= 1.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    }
}

/// Per-pixel tissue labels before texture: `Some(class)` inside the head.
struct Layout {
    labels: Vec<Option<usize>>,
    head: Ellipse,
}

fn draw_layout(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Layout {
    let n = spec.size as f64;
    let centre = n / 2.0 - 0.5;
    let jitter = (-spec.jitter, spec.jitter);
    let head = Ellipse {
        cy: centre + uniform(rng, jitter) * n,
        cx: centre + uniform(rng, jitter) * n,
        ry: uniform(rng, spec.head_radius) * n,
        rx: uniform(rng, spec.head_radius) * n,
        cos: 1.0,
        sin: 0.0,
    };
    let (lo, hi) = spec.regions;
    let inner = rng.random_range(lo..=hi) - 1;
    // partial Fisher-Yates over the template slots
    let mut slots: Vec<usize> = (0..spec.structures.len()).collect();
    for k in 0..inner {
        let j = rng.random_range(k..slots.len());
        slots.swap(k, j);
    }
    let mut chosen: Vec<usize> = slots[..inner].to_vec();
    chosen.sort_unstable();
    let mut labels: Vec<Option<usize>> = (0..spec.size * spec.size)
        .map(|i| {
            let (r, c) = ((i / spec.size) as f64, (i % spec.size) as f64);
            head.contains(r, c).then_some(spec.base_class)
        })
        .collect();
    for slot in chosen {
        let s = spec.structures[slot];
        let theta = s.angle + uniform(rng, (-0.15, 0.15));
        let region = Ellipse {
            cy: head.cy + s.offset.0 * head.ry + uniform(rng, jitter) * n,
            cx: head.cx + s.offset.1 * head.rx + uniform(rng, jitter) * n,
            ry: uniform(rng, s.radius.0) * n,
            rx: uniform(rng, s.radius.1) * n,
            cos: libm::cos(theta),
            sin: libm::sin(theta),
        };
        for (i, label) in labels.iter_mut().enumerate() {
            let (r, c) = ((i / spec.size) as f64, (i % spec.size) as f64);
            if label.is_some() && region.contains(r, c) {
                *label = Some(s.class);
            }
        }
    }
    Layout { labels, head }
}

const ANOMALY_MARGIN: f64 = 1.6;

/// Draws an anomaly ellipse lying in base tissue, retrying a bounded number
/// of times; the last draw is kept if none fits entirely.
fn draw_anomaly(spec: &PhantomSpec, layout: &Layout, rng: &mut ChaCha8Rng) -> BinaryMask {
    let size = spec.size;
    let n = size as f64;
    let head = layout.head;
    let mut mask = BinaryMask::empty(size, size);
    for _ in 0..256 {
        let angle = uniform(rng, (0.0, 2.0 * PI));
        let dist = libm::sqrt(uniform(rng, (0.0, 1.0))) * 0.75;
        let theta = uniform(rng, (0.0, PI));
        let ellipse = Ellipse {
            cy: head.cy + libm::sin(angle) * dist * head.ry,
            cx: head.cx + libm::cos(angle) * dist * head.rx,
            ry: uniform(rng, spec.anomaly_radius) * n,
            rx: uniform(rng, spec.anomaly_radius) * n,
            cos: libm::cos(theta),
            sin: libm::sin(theta),
        };
        // the anomaly and a margin around it must lie in base tissue, so its
        // blurred edge never mixes with another structure
        let margin = Ellipse {
            ry: ellipse.ry * ANOMALY_MARGIN,
            rx: ellipse.rx * ANOMALY_MARGIN,
            ..ellipse
        };
        let mut fits = true;
        for r in 0..size {
            for c in 0..size {
                let (rf, cf) = (r as f64, c as f64);
                let label = layout.labels[r * size + c];
                mask.set(r, c, ellipse.contains(rf, cf) && label.is_some());
                if margin.contains(rf, cf) && label != Some(spec.base_class) {
                    fits = false;
                }
            }
        }
        if fits && !mask.is_empty_set() {
            break;
        }
    }
    mask
}

fn generate_slice(spec: &PhantomSpec, split: Split, index: usize, mode: Option<AnomalyMode>) -> SlicePair {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split_stream(split) << 32 | index as u64);
    let layout = draw_layout(spec, &mut rng);
    let size = spec.size;

    let mut anomaly = BinaryMask::empty(size, size);
    let mut anomaly_class: Option<TissueClass> = None;
    if let Some(mode) = mode {
        anomaly = draw_anomaly(spec, &layout, &mut rng);
        anomaly_class = Some(match mode {
            AnomalyMode::Distinct => spec.distinct,
            AnomalyMode::Camouflage => {
                let candidates: Vec<usize> = (0..spec.classes.len()).filter(|&k| k != spec.base_class).collect();
                let matched = spec.classes[candidates[rng.random_range(0..candidates.len())]];
                let shifted = if matched.intensity_y + spec.camouflage_offset_y <= 1.2 {
                    matched.intensity_y + spec.camouflage_offset_y
                } else {
                    matched.intensity_y - spec.camouflage_offset_y
                };
                TissueClass::new(matched.intensity_x, shifted)
            }
        });
    }

    let mut x = Image::zeros(size, size);
    let mut y = Image::zeros(size, size);
    for i in 0..size * size {
        let Some(label) = layout.labels[i] else { continue };
        let class = if anomaly.as_slice()[i] {
            anomaly_class.expect("anomaly class drawn with the mask")
        } else {
            spec.classes[label]
        };
        let texture = if spec.noise_sigma > 0.0 {
            spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        x.as_mut_slice()[i] = class.intensity_x + texture;
        y.as_mut_slice()[i] = class.intensity_y + texture;
    }

    SlicePair {
        x,
        y,
        anomaly,
        subject_id: alloc::format!("phantom-{}-{index:05}", split.name()),
        slice_index: index,
        split,
        mode,
    }
}

/// Generates `n_slices` slice pairs. Training slices are always anomaly-free;
/// validation and test slices each carry one anomaly, cycling through
/// `spec.anomaly_modes` (none when that list is empty).
pub fn generate_phantom(spec: &PhantomSpec, n_slices: usize, split: Split) -> Result<Vec<SlicePair>> {
    spec.validate()?;
    Ok((0..n_slices)
        .map(|i| {
            let mode = match split {
                Split::Train => None,
                Split::Val | Split::Test => {
                    if spec.anomaly_modes.is_empty() {
                        None
                    } else {
                        Some(spec.anomaly_modes[i % spec.anomaly_modes.len()])
                    }
                }
            };
            generate_slice(spec, split, i, mode)
        })
        .collect())
}
