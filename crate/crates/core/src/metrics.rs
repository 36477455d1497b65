//! Segmentation metrics and validation-set threshold selection.
//!
//! Overlap metrics are computed per slice and averaged; AUC is computed on
//! the pooled pixel population of all slices. Metrics with an empty
//! denominator are undefined (`None`) and excluded from averages, with the
//! number of exclusions reported.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::math::{percentile_sorted, sort_floats, CompensatedSum};

/// Confusion counts between a prediction and a ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overlap {
    pub intersection: usize,
    pub predicted: usize,
    pub truth: usize,
}

impl Overlap {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        pred.ensure_same_shape(gt)?;
        let mut o = Overlap::default();
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            o.predicted += p as usize;
            o.truth += g as usize;
            o.intersection += (p && g) as usize;
        }
        Ok(o)
    }

    pub fn union(&self) -> usize {
        self.predicted + self.truth - self.intersection
    }

    /// `2|P∩G| / (|P| + |G|)`, 1.0 when both sets are empty.
    pub fn dice(&self) -> f64 {
        let denom = self.predicted + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }

    pub fn jaccard(&self) -> Option<f64> {
        ratio(self.intersection, self.union())
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.intersection, self.predicted)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.intersection, self.truth)
    }
}

fn ratio(num: usize, denom: usize) -> Option<f64> {
    (denom > 0).then(|| num as f64 / denom as f64)
}

pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(Overlap::of(pred, gt)?.dice())
}

pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    Ok(Overlap::of(pred, gt)?.jaccard())
}

pub fn precision(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    Ok(Overlap::of(pred, gt)?.precision())
}

pub fn recall(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    Ok(Overlap::of(pred, gt)?.recall())
}

/// Rank-based ROC AUC (Mann-Whitney form) with midranks for ties. `None`
/// when either class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument("scores and labels differ in length"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are 1-based; twice the rank keeps midranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share the midrank (i + 1 + j) / 2
        let twice_midrank = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += twice_midrank * pos_in_group;
        i = j;
    }
    let p = positives as u128;
    // U = R_pos - p(p+1)/2, all doubled
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(Some(twice_u as f64 / (2.0 * positives as f64 * negatives as f64)))
}

/// AUC over the pixels of all slices pooled together.
pub fn pooled_auc(scores: &[Image], gts: &[BinaryMask]) -> Result<Option<f64>> {
    if scores.len() != gts.len() {
        return Err(Error::InvalidArgument("score and ground-truth counts differ"));
    }
    let mut s = Vec::new();
    let mut l = Vec::new();
    for (score, gt) in scores.iter().zip(gts) {
        if score.shape() != gt.shape() {
            return Err(Error::ShapeMismatch {
                left: score.shape(),
                right: gt.shape(),
            });
        }
        s.extend_from_slice(score.as_slice());
        l.extend_from_slice(gt.as_slice());
    }
    auc(&s, &l)
}

/// Member pixels with at least one 4-neighbour outside the set. Pixels beyond
/// the image border count as outside.
pub fn surface(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = mask.shape();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance to the nearest seed pixel, by separable
/// lower-envelope transforms along columns then rows.
fn squared_distance_transform(h: usize, w: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    // Larger than any in-image squared distance yet small enough to keep
    // the parabola intersections exact.
    let far = (2 * (h * h + w * w) + 1) as f64;
    let mut grid = vec![far; h * w];
    for &(r, c) in seeds {
        grid[r * w + c] = 0.0;
    }
    let mut buf = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            buf[r] = grid[r * w + c];
        }
        lower_envelope(&buf[..h], &mut out[..h]);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        buf[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        lower_envelope(&buf[..w], &mut out[..w]);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn lower_envelope(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, slot) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *slot = dq * dq + f[p];
    }
}

fn directed_mean_distance(from: &[(usize, usize)], to_field: &[f64], w: usize) -> f64 {
    let mut acc = CompensatedSum::default();
    for &(r, c) in from {
        acc.add(libm::sqrt(to_field[r * w + c]));
    }
    acc.value() / from.len() as f64
}

/// Average symmetric surface distance in pixels: the mean of the two directed
/// average boundary-to-boundary distances. `None` if either set is empty.
pub fn assd(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    pred.ensure_same_shape(gt)?;
    let (h, w) = pred.shape();
    let sp = surface(pred);
    let sg = surface(gt);
    if sp.is_empty() || sg.is_empty() {
        return Ok(None);
    }
    let dist_to_gt = squared_distance_transform(h, w, &sg);
    let dist_to_pred = squared_distance_transform(h, w, &sp);
    let a = directed_mean_distance(&sp, &dist_to_gt, w);
    let b = directed_mean_distance(&sg, &dist_to_pred, w);
    Ok(Some((a + b) / 2.0))
}

/// Number of threshold candidates in the validation sweep.
pub const THRESHOLD_SWEEP_POINTS: usize = 200;

/// Evenly spaced candidates between the 1st and 99th percentile of the pooled scores.
pub fn threshold_candidates(scores: &[Image], points: usize) -> Result<Vec<f64>> {
    let mut pooled: Vec<f64> = scores.iter().flat_map(|s| s.as_slice().iter().copied()).collect();
    if pooled.is_empty() || points == 0 {
        return Err(Error::InvalidArgument("threshold sweep needs scores and points"));
    }
    sort_floats(&mut pooled);
    let lo = percentile_sorted(&pooled, 1.0);
    let hi = percentile_sorted(&pooled, 99.0);
    Ok((0..points)
        .map(|k| {
            if points == 1 {
                lo
            } else {
                lo + (hi - lo) * k as f64 / (points - 1) as f64
            }
        })
        .collect())
}

/// Mean per-slice Dice at `threshold`.
pub fn mean_dice_at(scores: &[Image], gts: &[BinaryMask], threshold: f64) -> Result<f64> {
    if scores.len() != gts.len() || scores.is_empty() {
        return Err(Error::InvalidArgument("need matching, non-empty score and truth lists"));
    }
    let mut acc = CompensatedSum::default();
    for (s, g) in scores.iter().zip(gts) {
        acc.add(dice(&s.threshold(threshold), g)?);
    }
    Ok(acc.value() / scores.len() as f64)
}

/// Best threshold among `candidates` by mean per-slice Dice; ties keep the
/// smallest threshold. Returns `(threshold, dice)`.
pub fn best_threshold(scores: &[Image], gts: &[BinaryMask], candidates: &[f64]) -> Result<(f64, f64)> {
    let mut sorted = candidates.to_vec();
    sort_floats(&mut sorted);
    let mut best: Option<(f64, f64)> = None;
    for h in sorted {
        let d = mean_dice_at(scores, gts, h)?;
        if best.map_or(true, |(_, bd)| d > bd) {
            best = Some((h, d));
        }
    }
    best.ok_or(Error::InvalidArgument("no threshold candidates"))
}

/// Threshold maximizing mean validation Dice over the 200-point percentile sweep.
pub fn select_threshold(scores: &[Image], gts: &[BinaryMask]) -> Result<f64> {
    let candidates = threshold_candidates(scores, THRESHOLD_SWEEP_POINTS)?;
    Ok(best_threshold(scores, gts, &candidates)?.0)
}

/// Mean of the defined values and how many were undefined.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Averaged {
    pub mean: Option<f64>,
    pub excluded: usize,
}

impl Averaged {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut acc = CompensatedSum::default();
        let mut n = 0usize;
        let mut excluded = 0usize;
        for v in values {
            match v {
                Some(x) => {
                    acc.add(x);
                    n += 1;
                }
                None => excluded += 1,
            }
        }
        Self {
            mean: (n > 0).then(|| acc.value() / n as f64),
            excluded,
        }
    }
}

/// Aggregated metrics for one method over a set of slices.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsSummary {
    pub dice: Averaged,
    pub auc: Option<f64>,
    pub jaccard: Averaged,
    pub precision: Averaged,
    pub recall: Averaged,
    pub assd: Averaged,
    pub threshold: f64,
    pub n_slices: usize,
}

/// Per-slice overlap metrics at `threshold`, averaged, plus pooled AUC.
pub fn summarize(scores: &[Image], gts: &[BinaryMask], threshold: f64) -> Result<MetricsSummary> {
    if scores.len() != gts.len() {
        return Err(Error::InvalidArgument("score and ground-truth counts differ"));
    }
    let mut dices = Vec::new();
    let mut jac = Vec::new();
    let mut prec = Vec::new();
    let mut rec = Vec::new();
    let mut dist = Vec::new();
    for (s, g) in scores.iter().zip(gts) {
        let pred = s.threshold(threshold);
        let o = Overlap::of(&pred, g)?;
        dices.push(Some(o.dice()));
        jac.push(o.jaccard());
        prec.push(o.precision());
        rec.push(o.recall());
        dist.push(assd(&pred, g)?);
    }
    Ok(MetricsSummary {
        dice: Averaged::of(dices),
        auc: pooled_auc(scores, gts)?,
        jaccard: Averaged::of(jac),
        precision: Averaged::of(prec),
        recall: Averaged::of(rec),
        assd: Averaged::of(dist),
        threshold,
        n_slices: scores.len(),
    })
}
