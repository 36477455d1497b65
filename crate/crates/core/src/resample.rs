//! Resampling to a square target grid with half-pixel-centre alignment.

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    let scale = src_len as f64 / dst_len as f64;
    ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64)
}

fn check_dims(h: usize, w: usize, target: usize) -> Result<()> {
    if h == 0 || w == 0 || target == 0 {
        return Err(Error::InvalidArgument("resample dimensions must be positive"));
    }
    Ok(())
}

/// Bilinear resampling of intensities to `target x target`.
pub fn resample_bilinear(image: &Image, target: usize) -> Result<Image> {
    let (h, w) = image.shape();
    check_dims(h, w, target)?;
    if h == target && w == target {
        return Ok(image.clone());
    }
    Ok(Image::from_fn(target, target, |r, c| {
        let sy = source_coord(r, h, target);
        let sx = source_coord(c, w, target);
        let y0 = libm::floor(sy) as usize;
        let x0 = libm::floor(sx) as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = sy - y0 as f64;
        let fx = sx - x0 as f64;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let top = lerp(image.get(y0, x0), image.get(y0, x1), fx);
        let bottom = lerp(image.get(y1, x0), image.get(y1, x1), fx);
        lerp(top, bottom, fy)
    }))
}

fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    let scale = src_len as f64 / dst_len as f64;
    (libm::floor((dst as f64 + 0.5) * scale) as usize).min(src_len - 1)
}

/// Nearest-neighbour resampling of a label mask to `target x target`.
pub fn resample_nearest(mask: &BinaryMask, target: usize) -> Result<BinaryMask> {
    let (h, w) = mask.shape();
    check_dims(h, w, target)?;
    Ok(BinaryMask::from_fn(target, target, |r, c| {
        mask.get(nearest_index(r, h, target), nearest_index(c, w, target))
    }))
}

/// Nearest-neighbour resampling of a real-valued label image.
pub fn resample_nearest_values(image: &Image, target: usize) -> Result<Image> {
    let (h, w) = image.shape();
    check_dims(h, w, target)?;
    Ok(Image::from_fn(target, target, |r, c| {
        image.get(nearest_index(r, h, target), nearest_index(c, w, target))
    }))
}
