//! On-disk dataset: one directory with image files per slice, a JSON-lines
//! manifest and a content digest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use mmccd_core::phantom::{AnomalyMode, SlicePair};
use mmccd_core::slices::Split;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pfm::{read_pfm, read_pgm, write_atomic, write_pfm, write_pgm};
use super::{DataError, Dataset};

pub const MANIFEST: &str = "manifest.jsonl";
pub const DIGEST: &str = "digest.txt";

/// One manifest line. Image paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    pub slice_index: usize,
    pub split: Split,
    pub anomaly_pixels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<AnomalyMode>,
    pub x: String,
    pub y: String,
    pub gt: String,
}

/// SHA-256 over every slice in split order: identifiers, then the float32
/// pixels of both modalities, then the mask bytes. Float32 matches the
/// stored precision, so the digest survives a write/read round trip.
pub fn dataset_digest(data: &Dataset) -> String {
    let mut h = Sha256::new();
    for p in data.iter() {
        h.update(p.subject_id.as_bytes());
        h.update((p.slice_index as u64).to_le_bytes());
        h.update(p.split.name().as_bytes());
        for img in [&p.x, &p.y] {
            h.update((img.height() as u64).to_le_bytes());
            h.update((img.width() as u64).to_le_bytes());
            for &v in img.as_slice() {
                h.update((v as f32).to_le_bytes());
            }
        }
        h.update(p.anomaly.as_slice().iter().map(|&b| b as u8).collect::<Vec<_>>());
    }
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn stem(p: &SlicePair, i: usize) -> String {
    format!("{}/{i:05}_{}_{:03}", p.split.name(), sanitize(&p.subject_id), p.slice_index)
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes `data` under `dir` and returns its digest.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<String, DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut manifest = Vec::new();
    for (i, p) in data.iter().enumerate() {
        let s = stem(p, i);
        let row = ManifestRow {
            subject_id: p.subject_id.clone(),
            slice_index: p.slice_index,
            split: p.split,
            anomaly_pixels: p.anomaly.count(),
            mode: p.mode,
            x: format!("{s}_x.pfm"),
            y: format!("{s}_y.pfm"),
            gt: format!("{s}_gt.pgm"),
        };
        write_pfm(&dir.join(&row.x), &p.x)?;
        write_pfm(&dir.join(&row.y), &p.y)?;
        write_pgm(&dir.join(&row.gt), &p.anomaly)?;
        serde_json::to_writer(&mut manifest, &row).map_err(|e| DataError::Format(e.to_string()))?;
        manifest.write_all(b"\n").expect("in-memory write");
    }
    write_atomic(&dir.join(MANIFEST), &manifest)?;
    let digest = dataset_digest(data);
    write_atomic(&dir.join(DIGEST), format!("{digest}\n").as_bytes())?;
    Ok(digest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, DataError> {
    let f = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| DataError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(rows)
}

/// Loads a dataset written by [`write_dataset`]; fails when the stored
/// digest does not match the loaded content.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let rows = read_manifest(&dir.join(MANIFEST))?;
    let mut data = Dataset::default();
    for row in rows {
        let pair = SlicePair {
            x: read_pfm(&dir.join(&row.x))?,
            y: read_pfm(&dir.join(&row.y))?,
            anomaly: read_pgm(&dir.join(&row.gt))?,
            subject_id: row.subject_id,
            slice_index: row.slice_index,
            split: row.split,
            mode: row.mode,
        };
        if pair.split == Split::Train && !pair.anomaly.is_empty_set() {
            return Err(DataError::Format(format!("training slice {} has anomaly pixels", pair.subject_id)));
        }
        match pair.split {
            Split::Train => data.train.push(pair),
            Split::Val => data.val.push(pair),
            Split::Test => data.test.push(pair),
        }
    }
    let digest_path = dir.join(DIGEST);
    if let Ok(stored) = fs::read_to_string(&digest_path) {
        let actual = dataset_digest(&data);
        if stored.trim() != actual {
            return Err(DataError::Format(format!(
                "{}: digest mismatch (stored {}, content {actual})",
                digest_path.display(),
                stored.trim()
            )));
        }
    }
    Ok(data)
}

pub fn read_digest(dir: &Path) -> Option<String> {
    fs::read_to_string(dir.join(DIGEST)).ok().map(|s| s.trim().to_string())
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{phantom_dataset, SplitCounts};
    use mmccd_core::phantom::PhantomSpec;

    #[test]
    fn round_trip_preserves_digest() {
        let spec = PhantomSpec { size: 32, ..PhantomSpec::default() };
        let data = phantom_dataset(&spec, SplitCounts { train: 3, val: 2, test: 2 }, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let digest = write_dataset(dir.path(), &data).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(dataset_digest(&back), digest);
        assert_eq!(back.len(), data.len());
        assert_eq!(read_manifest(&manifest_path(dir.path())).unwrap().len(), 7);
    }

    #[test]
    fn tampering_is_detected() {
        let spec = PhantomSpec { size: 32, ..PhantomSpec::default() };
        let data = phantom_dataset(&spec, SplitCounts { train: 1, val: 0, test: 0 }, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let rows = read_manifest(&manifest_path(dir.path())).unwrap();
        let mut img = read_pfm(&dir.path().join(&rows[0].x)).unwrap();
        img.set(0, 0, 5.0);
        write_pfm(&dir.path().join(&rows[0].x), &img).unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }
}
