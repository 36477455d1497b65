//! Ingestion of BraTS-style subject directories.
//!
//! Expected layout: `<root>/<subject>/<subject>_<modality>.nii[.gz]` for each
//! modality plus `<subject>_seg.nii[.gz]`, where any nonzero label counts as
//! tumour.

use std::fs;
use std::path::{Path, PathBuf};

use mmccd_core::normalize::{normalize_volume, Modality};
use mmccd_core::phantom::SlicePair;
use mmccd_core::resample::{resample_bilinear, resample_nearest};
use mmccd_core::slices::{select_slices, split_subjects, Split};
use mmccd_core::{BinaryMask, Image};
use rayon::prelude::*;

use super::nifti::{read_volume, Volume};
use super::{DataError, Dataset};

pub const LAYOUT: &str = "<root>/<subject>/<subject>_{flair,t1,t2,seg}.nii.gz";

#[derive(Debug, Clone)]
pub struct BratsOptions {
    pub modality_x: Modality,
    pub modality_y: Modality,
    pub resolution: usize,
    pub split_seed: u64,
}

/// Finds `<dir>/<subject>_<suffix>.nii.gz` or `.nii`.
fn volume_path(dir: &Path, subject: &str, suffix: &str) -> Option<PathBuf> {
    ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{subject}_{suffix}.{ext}")))
        .find(|p| p.is_file())
}

/// Subject directories that contain both requested modalities and a label
/// volume, sorted by name.
pub fn discover(root: &Path, opts: &BratsOptions) -> Result<Vec<String>, DataError> {
    if !root.is_dir() {
        return Err(DataError::Layout(format!("{} is not a directory; expected {LAYOUT}", root.display())));
    }
    let mut subjects = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| DataError::io(root, e))? {
        let entry = entry.map_err(|e| DataError::io(root, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let dir = entry.path();
        let complete = [opts.modality_x.name(), opts.modality_y.name(), "seg"]
            .iter()
            .all(|s| volume_path(&dir, &name, s).is_some());
        if complete {
            subjects.push(name);
        } else {
            log::warn!("{}: incomplete subject directory, skipped", dir.display());
        }
    }
    subjects.sort();
    if subjects.is_empty() {
        return Err(DataError::Layout(format!("no subjects found under {}; expected {LAYOUT}", root.display())));
    }
    Ok(subjects)
}

fn slice_image(vol: &[f64], dims: [usize; 3], z: usize) -> Image {
    let n = dims[0] * dims[1];
    Image::from_vec(dims[1], dims[0], vol[z * n..(z + 1) * n].to_vec()).expect("slice size")
}

/// Slices of one subject for `split`, normalized and resampled.
pub fn ingest_subject(root: &Path, subject: &str, split: Split, opts: &BratsOptions) -> Result<Vec<SlicePair>, DataError> {
    let dir = root.join(subject);
    let load = |suffix: &str| -> Result<Volume, DataError> {
        let path = volume_path(&dir, subject, suffix)
            .ok_or_else(|| DataError::Layout(format!("{}: missing {suffix} volume", dir.display())))?;
        read_volume(&path)
    };
    let vx = load(opts.modality_x.name())?;
    let vy = load(opts.modality_y.name())?;
    let seg = load("seg")?;
    if vx.dims != vy.dims || vx.dims != seg.dims {
        return Err(DataError::Format(format!("{subject}: volume dimensions differ")));
    }
    let nx = normalize_volume(&vx.data, opts.modality_x).map_err(|e| DataError::Core(subject.into(), e))?;
    let ny = normalize_volume(&vy.data, opts.modality_y).map_err(|e| DataError::Core(subject.into(), e))?;
    let counts: Vec<usize> = (0..seg.depth()).map(|z| seg.axial(z).iter().filter(|&&v| v != 0.0).count()).collect();
    let chosen = select_slices(&counts, split).map_err(|e| DataError::Core(subject.into(), e))?;
    if chosen.is_empty() {
        log::warn!("{subject}: no qualifying slice for the {} split, skipped", split.name());
    }
    let [w, h, _] = seg.dims;
    chosen
        .into_iter()
        .map(|z| {
            let label = BinaryMask::from_vec(h, w, seg.axial(z).iter().map(|&v| v != 0.0).collect()).expect("slice size");
            let resample = |img: Image| resample_bilinear(&img, opts.resolution);
            Ok(SlicePair {
                x: resample(slice_image(&nx, vx.dims, z)).map_err(|e| DataError::Core(subject.into(), e))?,
                y: resample(slice_image(&ny, vy.dims, z)).map_err(|e| DataError::Core(subject.into(), e))?,
                anomaly: resample_nearest(&label, opts.resolution).map_err(|e| DataError::Core(subject.into(), e))?,
                subject_id: subject.to_string(),
                slice_index: z,
                split,
                mode: None,
            })
        })
        .collect()
}

/// Splits subjects 80/10/10 and ingests them in parallel; the merge is
/// ordered by subject id.
pub fn ingest(root: &Path, opts: &BratsOptions) -> Result<Dataset, DataError> {
    let subjects = discover(root, opts)?;
    let (train, val, test) = split_subjects(&subjects, opts.split_seed);
    let run = |ids: &[String], split: Split| -> Result<Vec<SlicePair>, DataError> {
        let parts: Vec<Vec<SlicePair>> = ids
            .par_iter()
            .map(|s| ingest_subject(root, s, split, opts))
            .collect::<Result<_, _>>()?;
        let mut out: Vec<SlicePair> = parts.into_iter().flatten().collect();
        out.sort_by(|a, b| (&a.subject_id, a.slice_index).cmp(&(&b.subject_id, b.slice_index)));
        Ok(out)
    };
    Ok(Dataset {
        train: run(&train, Split::Train)?,
        val: run(&val, Split::Val)?,
        test: run(&test, Split::Test)?,
    })
}
