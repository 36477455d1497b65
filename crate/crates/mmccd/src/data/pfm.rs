//! Image files: greyscale PFM for real-valued maps, binary PGM for masks.
//!
//! PFM stores rows bottom to top as little-endian float32.

use std::fs;
use std::io::Write;
use std::path::Path;

use mmccd_core::{BinaryMask, Image};

use super::DataError;

pub fn encode_pfm(image: &Image) -> Vec<u8> {
    let (h, w) = image.shape();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * 4);
    for r in (0..h).rev() {
        for c in 0..w {
            out.extend_from_slice(&(image.get(r, c) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Image, String> {
    let (fields, body) = header(bytes, 3)?;
    if fields[0] != "Pf" {
        return Err("not a greyscale PFM file".into());
    }
    let w: usize = fields[1].parse().map_err(|_| "bad width")?;
    let h: usize = fields[2].parse().map_err(|_| "bad height")?;
    let scale: f64 = fields[3].parse().map_err(|_| "bad scale")?;
    if w == 0 || h == 0 || scale == 0.0 {
        return Err("degenerate PFM header".into());
    }
    if body.len() != w * h * 4 {
        return Err(format!("expected {} data bytes, found {}", w * h * 4, body.len()));
    }
    let little = scale < 0.0;
    let mut image = Image::zeros(h, w);
    for (i, c) in body.chunks_exact(4).enumerate() {
        let b: [u8; 4] = c.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        image.set(h - 1 - i / w, i % w, v as f64);
    }
    Ok(image)
}

pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let (h, w) = mask.shape();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.as_slice().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<BinaryMask, String> {
    let (fields, body) = header(bytes, 3)?;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err("not an 8-bit binary PGM file".into());
    }
    let w: usize = fields[1].parse().map_err(|_| "bad width")?;
    let h: usize = fields[2].parse().map_err(|_| "bad height")?;
    if body.len() != w * h {
        return Err(format!("expected {} data bytes, found {}", w * h, body.len()));
    }
    BinaryMask::from_vec(h, w, body.iter().map(|&v| v > 127).collect()).map_err(|e| e.to_string())
}

/// Splits off a magic token plus `n` whitespace-separated header fields and
/// the single whitespace byte that ends the header.
fn header(bytes: &[u8], n: usize) -> Result<(Vec<String>, &[u8]), String> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < n + 1 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    Ok((fields, bytes.get(i + 1..).unwrap_or(&[])))
}

/// Writes through a temporary sibling and renames, so readers never observe
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| DataError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| DataError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DataError::io(path, e))
}

pub fn write_pfm(path: &Path, image: &Image) -> Result<(), DataError> {
    write_atomic(path, &encode_pfm(image))
}

pub fn read_pfm(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_pfm(&bytes).map_err(|m| DataError::Format(format!("{}: {m}", path.display())))
}

pub fn write_pgm(path: &Path, mask: &BinaryMask) -> Result<(), DataError> {
    write_atomic(path, &encode_pgm(mask))
}

pub fn read_pgm(path: &Path) -> Result<BinaryMask, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_pgm(&bytes).map_err(|m| DataError::Format(format!("{}: {m}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_is_exact_for_f32_values() {
        let img = Image::from_fn(3, 5, |r, c| (r * 5 + c) as f64 * 0.25 - 1.0);
        let back = decode_pfm(&encode_pfm(&img)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_round_trip() {
        let m = BinaryMask::from_fn(4, 3, |r, c| (r + c) % 2 == 0);
        assert_eq!(decode_pgm(&encode_pgm(&m)).unwrap(), m);
    }

    #[test]
    fn rejects_truncated() {
        let img = Image::zeros(2, 2);
        let bytes = encode_pfm(&img);
        assert!(decode_pfm(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_pfm(b"P6\n1 1\n-1\n").is_err());
    }
}
