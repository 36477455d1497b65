//! Minimal NIfTI-1 single-file reader (`.nii` and `.nii.gz`).

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;

use super::DataError;

const HEADER_LEN: usize = 348;

/// A 3D scalar volume stored x-fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn depth(&self) -> usize {
        self.dims[2]
    }

    /// Axial slice `z` as `(rows = y, cols = x)` values.
    pub fn axial(&self, z: usize) -> &[f64] {
        let n = self.dims[0] * self.dims[1];
        &self.data[z * n..(z + 1) * n]
    }
}

pub fn read_volume(path: &Path) -> Result<Volume, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut bytes = Vec::new();
    let gz = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    if gz {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)
    } else {
        BufReader::new(file).read_to_end(&mut bytes)
    }
    .map_err(|e| DataError::io(path, e))?;
    parse(&bytes).map_err(|msg| DataError::Format(format!("{}: {msg}", path.display())))
}

/// Parses an in-memory NIfTI-1 file.
pub fn parse(bytes: &[u8]) -> Result<Volume, String> {
    if bytes.len() < HEADER_LEN {
        return Err("file shorter than a NIfTI-1 header".into());
    }
    let little = match (
        i32::from_le_bytes(bytes[0..4].try_into().unwrap()),
        i32::from_be_bytes(bytes[0..4].try_into().unwrap()),
    ) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err("sizeof_hdr is not 348".into()),
    };
    let i16_at = |o: usize| {
        let b = [bytes[o], bytes[o + 1]];
        if little { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }
    };
    let f32_at = |o: usize| {
        let b: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
        if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
    };
    if &bytes[344..347] != b"n+1" {
        return Err("not a single-file NIfTI-1 image (magic n+1)".into());
    }
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(format!("invalid dimension count {ndim}"));
    }
    let mut dims = [1usize; 3];
    for (i, d) in dims.iter_mut().enumerate().take((ndim as usize).min(3)) {
        let v = i16_at(42 + 2 * i);
        if v < 1 {
            return Err(format!("invalid extent {v} on axis {i}"));
        }
        *d = v as usize;
    }
    for i in 3..ndim as usize {
        if i16_at(42 + 2 * i) > 1 {
            return Err("only 3D scalar volumes are supported".into());
        }
    }
    let datatype = i16_at(70);
    let offset = f32_at(108);
    if !(offset >= HEADER_LEN as f32) {
        return Err(format!("invalid vox_offset {offset}"));
    }
    let offset = offset as usize;
    let (slope, inter) = (f32_at(112) as f64, f32_at(116) as f64);
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() { (1.0, 0.0) } else { (slope, inter) };

    let n = dims.iter().product::<usize>();
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => return Err(format!("unsupported datatype code {other}")),
    };
    let raw = bytes
        .get(offset..offset + n * width)
        .ok_or_else(|| "voxel data truncated".to_string())?;
    let mut data = Vec::with_capacity(n);
    for c in raw.chunks_exact(width) {
        let v = match (datatype, width) {
            (2, _) => c[0] as f64,
            (256, _) => c[0] as i8 as f64,
            (4, _) => endian(little, c, i16::from_le_bytes, i16::from_be_bytes) as f64,
            (512, _) => endian(little, c, u16::from_le_bytes, u16::from_be_bytes) as f64,
            (8, _) => endian(little, c, i32::from_le_bytes, i32::from_be_bytes) as f64,
            (768, _) => endian(little, c, u32::from_le_bytes, u32::from_be_bytes) as f64,
            (16, _) => endian(little, c, f32::from_le_bytes, f32::from_be_bytes) as f64,
            _ => endian(little, c, f64::from_le_bytes, f64::from_be_bytes),
        };
        data.push(v * slope + inter);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err("non-finite voxel values".into());
    }
    Ok(Volume { dims, data })
}

fn endian<const N: usize, T>(little: bool, c: &[u8], le: fn([u8; N]) -> T, be: fn([u8; N]) -> T) -> T {
    let b: [u8; N] = c.try_into().unwrap();
    if little { le(b) } else { be(b) }
}

/// Encodes a float32 little-endian NIfTI-1 file; used to build fixtures.
pub fn encode_f32(dims: [usize; 3], data: &[f32]) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    for (i, d) in dims.iter().enumerate() {
        h[42 + 2 * i..44 + 2 * i].copy_from_slice(&(*d as i16).to_le_bytes());
    }
    h[70..72].copy_from_slice(&16i16.to_le_bytes());
    h[72..74].copy_from_slice(&32i16.to_le_bytes());
    h[108..112].copy_from_slice(&352f32.to_le_bytes());
    h[112..116].copy_from_slice(&1f32.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    for v in data {
        h.extend_from_slice(&v.to_le_bytes());
    }
    h
}
