//! Score-map files, threshold selection and metrics reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mmccd_core::metrics::{mean_dice_at, select_threshold, summarize, Averaged, MetricsSummary};
use mmccd_core::phantom::{AnomalyMode, SlicePair};
use mmccd_core::slices::Split;
use mmccd_core::{BinaryMask, Image};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::pfm::{encode_pfm, read_pfm, write_atomic};
use crate::data::store::{hex, ManifestRow};
use crate::data::DataError;
use crate::pipelines::InferenceResult;

pub const SCORE_MANIFEST: &str = "scores.jsonl";

/// Metric columns of the text report, in order.
pub const COLUMNS: [&str; 6] = ["DICE", "AUC", "Jac", "Prec", "Rec", "ASSD"];

/// One score-map manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub subject_id: String,
    pub slice_index: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<AnomalyMode>,
    pub score: String,
    pub sha256: String,
    /// Pixels that no mask covered; their score is 0.
    pub uncovered: usize,
}

/// Writes one PFM score map per slice plus the manifest; returns the rows.
pub fn write_scores(dir: &Path, slices: &[SlicePair], results: &[InferenceResult]) -> Result<Vec<ScoreRow>, DataError> {
    assert_eq!(slices.len(), results.len(), "one result per slice");
    let mut rows = Vec::with_capacity(slices.len());
    let mut manifest = Vec::new();
    for (i, (pair, r)) in slices.iter().zip(results).enumerate() {
        let bytes = encode_pfm(&r.anomaly_score);
        let name = format!("{}/{i:05}_{:03}.pfm", pair.split.name(), pair.slice_index);
        write_atomic(&dir.join(&name), &bytes)?;
        let row = ScoreRow {
            subject_id: pair.subject_id.clone(),
            slice_index: pair.slice_index,
            split: pair.split,
            mode: pair.mode,
            score: name,
            sha256: hex(&Sha256::digest(&bytes)),
            uncovered: r.uncovered,
        };
        serde_json::to_writer(&mut manifest, &row).map_err(|e| DataError::Format(e.to_string()))?;
        manifest.push(b'\n');
        rows.push(row);
    }
    write_atomic(&dir.join(SCORE_MANIFEST), &manifest)?;
    Ok(rows)
}

/// Digest over the per-map digests in manifest order.
pub fn scores_digest(rows: &[ScoreRow]) -> String {
    let mut h = Sha256::new();
    for r in rows {
        h.update(r.sha256.as_bytes());
    }
    hex(&h.finalize())
}

pub fn read_score_manifest(dir: &Path) -> Result<Vec<ScoreRow>, DataError> {
    let path = dir.join(SCORE_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| DataError::Format(format!("{}:{}: {e}", path.display(), n + 1))))
        .collect()
}

/// A score map joined with its ground truth.
#[derive(Debug, Clone)]
pub struct ScoredSlice {
    pub row: ScoreRow,
    pub score: Image,
    pub gt: BinaryMask,
}

/// Loads score maps and pairs each with the ground-truth mask of the same
/// (subject, slice, split) from the dataset manifest.
pub fn load_scored(score_dir: &Path, data_dir: &Path, gt_rows: &[ManifestRow]) -> Result<Vec<ScoredSlice>, DataError> {
    let index: BTreeMap<(&str, usize, Split), &ManifestRow> =
        gt_rows.iter().map(|r| ((r.subject_id.as_str(), r.slice_index, r.split), r)).collect();
    read_score_manifest(score_dir)?
        .into_iter()
        .map(|row| {
            let gt_row = index
                .get(&(row.subject_id.as_str(), row.slice_index, row.split))
                .ok_or_else(|| DataError::Format(format!("no ground truth for {} slice {}", row.subject_id, row.slice_index)))?;
            let gt = crate::data::pfm::read_pgm(&data_dir.join(&gt_row.gt))?;
            let score = read_pfm(&score_dir.join(&row.score))?;
            if score.shape() != gt.shape() {
                return Err(DataError::Format(format!("{}: score and ground truth shapes differ", row.score)));
            }
            Ok(ScoredSlice { row, score, gt })
        })
        .collect()
}

/// Where the threshold comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ThresholdSource {
    Fixed(f64),
    FromValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub threshold: f64,
    pub threshold_source: ThresholdSource,
    pub validation_dice: Option<f64>,
    pub n_slices: usize,
    pub dice: Averaged,
    pub auc: Option<f64>,
    pub jaccard: Averaged,
    pub precision: Averaged,
    pub recall: Averaged,
    pub assd: Averaged,
    /// The same metrics restricted to each anomaly mode present.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub subsets: BTreeMap<String, MetricsSummary>,
    pub notes: Vec<String>,
    #[serde(default)]
    pub config: serde_json::Value,
}

fn split_parts(slices: &[ScoredSlice]) -> (Vec<Image>, Vec<BinaryMask>) {
    slices.iter().map(|s| (s.score.clone(), s.gt.clone())).unzip()
}

/// Scores `test` at a fixed threshold or at the one that maximizes mean
/// validation Dice.
pub fn evaluate(
    method: &str,
    val: &[ScoredSlice],
    test: &[ScoredSlice],
    source: ThresholdSource,
    config: serde_json::Value,
) -> Result<MetricsReport, mmccd_core::Error> {
    let (val_scores, val_gts) = split_parts(val);
    let (threshold, validation_dice) = match source {
        ThresholdSource::Fixed(h) => (h, None),
        ThresholdSource::FromValidation => {
            if val.is_empty() {
                return Err(mmccd_core::Error::InvalidArgument("threshold selection needs validation score maps"));
            }
            let h = select_threshold(&val_scores, &val_gts)?;
            (h, Some(mean_dice_at(&val_scores, &val_gts, h)?))
        }
    };
    let (scores, gts) = split_parts(test);
    let all = summarize(&scores, &gts, threshold)?;
    let mut subsets = BTreeMap::new();
    for mode in [AnomalyMode::Distinct, AnomalyMode::Camouflage] {
        let part: Vec<ScoredSlice> = test.iter().filter(|s| s.row.mode == Some(mode)).cloned().collect();
        if !part.is_empty() {
            let (s, g) = split_parts(&part);
            let name = serde_json::to_value(mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            subsets.insert(name, summarize(&s, &g, threshold)?);
        }
    }
    Ok(MetricsReport {
        method: method.to_string(),
        threshold,
        threshold_source: source,
        validation_dice,
        n_slices: all.n_slices,
        dice: all.dice,
        auc: all.auc,
        jaccard: all.jaccard,
        precision: all.precision,
        recall: all.recall,
        assd: all.assd,
        subsets,
        notes: vec![
            "DICE, Jac, Prec, Rec and ASSD are per-slice values averaged over slices; undefined values are excluded and counted".into(),
            "AUC is computed over the pooled pixels of all slices".into(),
        ],
        config,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

/// Plain-text table, one row per report, followed by threshold and
/// exclusion notes.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<14}{}", "Method", COLUMNS.iter().map(|c| format!("{c:>9}")).collect::<String>());
    for r in reports {
        let vals = [r.dice.mean, r.auc, r.jaccard.mean, r.precision.mean, r.recall.mean, r.assd.mean];
        let _ = writeln!(out, "{:<14}{}", r.method, vals.iter().map(|v| format!("{:>9}", cell(*v))).collect::<String>());
    }
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "# {}: threshold {:.6} ({}), {} slices, excluded jac/prec/rec/assd = {}/{}/{}/{}",
            r.method,
            r.threshold,
            match r.threshold_source {
                ThresholdSource::Fixed(_) => "fixed",
                ThresholdSource::FromValidation => "validation",
            },
            r.n_slices,
            r.jaccard.excluded,
            r.precision.excluded,
            r.recall.excluded,
            r.assd.excluded
        );
    }
    if let Some(r) = reports.first() {
        for n in &r.notes {
            let _ = writeln!(out, "# {n}");
        }
    }
    out
}
