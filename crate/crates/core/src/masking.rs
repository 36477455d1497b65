//! Strip masks, masked-condition synthesis and mask-weighted aggregation of
//! per-mask translation errors into a single anomaly map.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::CompensatedSum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Orientation {
    /// Full-width band of `extent` rows.
    Horizontal,
    /// Full-height band of `extent` columns.
    Vertical,
}

/// One band mask. Pixels inside the band are 1 (masked), the rest 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MaskStrip {
    pub orientation: Orientation,
    pub offset: usize,
    pub extent: usize,
    pub height: usize,
    pub width: usize,
}

impl MaskStrip {
    pub fn new(
        orientation: Orientation,
        offset: usize,
        extent: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let dim = match orientation {
            Orientation::Horizontal => height,
            Orientation::Vertical => width,
        };
        if extent == 0 || offset + extent > dim {
            return Err(Error::InvalidMaskConfig("strip does not fit inside the image"));
        }
        Ok(Self {
            orientation,
            offset,
            extent,
            height,
            width,
        })
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        let pos = match self.orientation {
            Orientation::Horizontal => row,
            Orientation::Vertical => col,
        };
        pos >= self.offset && pos < self.offset + self.extent
    }

    pub fn as_image(&self) -> Image {
        Image::from_fn(self.height, self.width, |r, c| {
            if self.contains(r, c) {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn area(&self) -> usize {
        match self.orientation {
            Orientation::Horizontal => self.extent * self.width,
            Orientation::Vertical => self.extent * self.height,
        }
    }

    /// Row-major indices of masked pixels.
    pub fn pixel_indices(&self) -> impl Iterator<Item = usize> + '_ {
        let (rows, cols) = match self.orientation {
            Orientation::Horizontal => (self.offset..self.offset + self.extent, 0..self.width),
            Orientation::Vertical => (0..self.height, self.offset..self.offset + self.extent),
        };
        let width = self.width;
        rows.flat_map(move |r| cols.clone().map(move |c| r * width + c))
    }
}

/// Ordered family of strips: horizontal strips by ascending offset, then vertical.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    masks: Vec<MaskStrip>,
    stride: usize,
    extent: usize,
    height: usize,
    width: usize,
    coverage: Vec<u32>,
}

/// Offsets `0, stride, ...` up to `dim - extent`, plus a flush-to-edge offset
/// when the last regular offset stops short of the far edge.
pub fn strip_offsets(dim: usize, extent: usize, stride: usize) -> Vec<usize> {
    if extent == 0 || extent > dim || stride == 0 {
        return Vec::new();
    }
    let last = dim - extent;
    let mut offsets: Vec<usize> = (0..=last).step_by(stride).collect();
    if offsets.last() != Some(&last) {
        offsets.push(last);
    }
    offsets
}

impl MaskSet {
    pub fn build(
        height: usize,
        width: usize,
        extent: usize,
        stride: usize,
        orientations: &[Orientation],
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidMaskConfig("stride must be positive"));
        }
        if extent == 0 || extent > height.min(width) {
            return Err(Error::InvalidMaskConfig("extent must lie in 1..=min(height, width)"));
        }
        let mut ordered: Vec<Orientation> = orientations.to_vec();
        ordered.sort();
        ordered.dedup();
        if ordered.is_empty() {
            return Err(Error::InvalidMaskConfig("no orientation selected"));
        }
        let mut masks = Vec::new();
        for orientation in ordered {
            let dim = match orientation {
                Orientation::Horizontal => height,
                Orientation::Vertical => width,
            };
            for offset in strip_offsets(dim, extent, stride) {
                masks.push(MaskStrip::new(orientation, offset, extent, height, width)?);
            }
        }
        let mut set = Self::from_strips(height, width, masks)?;
        set.stride = stride;
        Ok(set)
    }

    /// A set from arbitrary strips, kept in the given order. `stride` is
    /// reported as 0 and `extent` as the largest strip extent.
    pub fn from_strips(height: usize, width: usize, masks: Vec<MaskStrip>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::InvalidMaskConfig("no masks"));
        }
        if masks.iter().any(|m| (m.height, m.width) != (height, width)) {
            return Err(Error::InvalidMaskConfig("strip shape differs from the set shape"));
        }
        let mut coverage = vec![0u32; height * width];
        for m in &masks {
            for i in m.pixel_indices() {
                coverage[i] += 1;
            }
        }
        Ok(Self {
            extent: masks.iter().map(|m| m.extent).max().unwrap_or(0),
            masks,
            stride: 0,
            height,
            width,
            coverage,
        })
    }

    /// A set holding one mask that covers the whole image.
    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::build(height, width, height, 1, &[Orientation::Horizontal])
    }

    pub fn masks(&self) -> &[MaskStrip] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Number of masks covering each pixel, row-major.
    pub fn coverage(&self) -> &[u32] {
        &self.coverage
    }

    pub fn uncovered_pixels(&self) -> usize {
        self.coverage.iter().filter(|&&c| c == 0).count()
    }
}

/// `(1 - m) * x + m * eps`. Pixels with `m = 0` come back bit-identical.
pub fn apply_mask_noise(x: &Image, mask: &Image, eps: &Image) -> Result<Image> {
    x.ensure_same_shape(mask)?;
    x.ensure_same_shape(eps)?;
    let mut out = x.clone();
    for ((o, &m), &e) in out
        .as_mut_slice()
        .iter_mut()
        .zip(mask.as_slice())
        .zip(eps.as_slice())
    {
        if m != 0.0 {
            *o = (1.0 - m) * *o + m * e;
        }
    }
    Ok(out)
}

/// Same as [`apply_mask_noise`] for a strip, without materializing the mask.
pub fn apply_strip_noise(x: &Image, strip: &MaskStrip, eps: &Image) -> Result<Image> {
    x.ensure_same_shape(eps)?;
    if x.shape() != (strip.height, strip.width) {
        return Err(Error::ShapeMismatch {
            left: x.shape(),
            right: (strip.height, strip.width),
        });
    }
    let mut out = x.clone();
    let data = out.as_mut_slice();
    for i in strip.pixel_indices() {
        data[i] = eps.as_slice()[i];
    }
    Ok(out)
}

/// Result of mask-weighted aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub score: Image,
    /// Pixels no mask covered; their score is 0.
    pub uncovered: usize,
}

/// Per-pixel mean of each error image over exactly the masks covering that
/// pixel. Sums use compensated accumulation so the result does not depend on
/// mask order beyond rounding of the final division.
pub fn aggregate_anomaly(per_mask_errors: &[Image], masks: &MaskSet) -> Result<Aggregate> {
    if per_mask_errors.len() != masks.len() {
        return Err(Error::MaskCountMismatch {
            expected: masks.len(),
            got: per_mask_errors.len(),
        });
    }
    let (h, w) = masks.shape();
    let mut sums = vec![CompensatedSum::default(); h * w];
    for (err, mask) in per_mask_errors.iter().zip(masks.masks()) {
        if err.shape() != (h, w) {
            return Err(Error::ShapeMismatch {
                left: err.shape(),
                right: (h, w),
            });
        }
        let values = err.as_slice();
        for i in mask.pixel_indices() {
            sums[i].add(values[i]);
        }
    }
    let mut uncovered = 0;
    let data = sums
        .iter()
        .zip(masks.coverage())
        .map(|(s, &n)| {
            if n == 0 {
                uncovered += 1;
                0.0
            } else {
                s.value() / n as f64
            }
        })
        .collect();
    Ok(Aggregate {
        score: Image::from_vec(h, w, data)?,
        uncovered,
    })
}
