//! Ranking metrics for detection and localization: area under the ROC
//! curve, average precision, maximum F1, and area under the per-region
//! overlap curve. Internals run in f64; ties are grouped into a single
//! threshold step everywhere.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MetricError {
    Empty,
    LengthMismatch { scores: usize, labels: usize },
    /// Ranking metrics need at least one positive and one negative.
    SingleClass,
    NonFiniteScore,
    /// FPR integration limit outside (0, 1].
    InvalidLimit,
    /// No ground-truth region in any mask.
    NoRegions,
    /// No negative pixel anywhere, so FPR is undefined.
    NoNegatives,
    ShapeMismatch,
}

impl core::fmt::Display for MetricError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MetricError::Empty => write!(f, "empty input"),
            MetricError::LengthMismatch { scores, labels } => {
                write!(f, "{scores} scores vs {labels} labels")
            }
            MetricError::SingleClass => write!(f, "only one class present"),
            MetricError::NonFiniteScore => write!(f, "non-finite score"),
            MetricError::InvalidLimit => write!(f, "fpr limit must be in (0, 1]"),
            MetricError::NoRegions => write!(f, "no ground-truth region in any mask"),
            MetricError::NoNegatives => write!(f, "no negative pixel in any mask"),
            MetricError::ShapeMismatch => write!(f, "map and mask shapes differ"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MetricError {}

pub type MetricResult<T> = core::result::Result<T, MetricError>;

fn class_counts(scores: &[f32], labels: &[bool]) -> MetricResult<(usize, usize)> {
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFiniteScore);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    Ok((pos, neg))
}

fn sorted_desc(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Probability that a random positive outranks a random negative, ties
/// counted half (Mann-Whitney, computed from average ranks).
pub fn auroc(scores: &[f32], labels: &[bool]) -> MetricResult<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n = idx.len();
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share the average (i + j + 1) / 2
        let avg_rank = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let p = pos as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * neg as f64))
}

/// Step-interpolated area under the precision-recall curve:
/// sum over descending thresholds of (R_n - R_{n-1}) * P_n.
pub fn average_precision(scores: &[f32], labels: &[bool]) -> MetricResult<f64> {
    let (pos, _) = class_counts(scores, labels)?;
    let idx = sorted_desc(scores);
    let n = idx.len();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0f64;
    let mut prev_recall = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// Maximum F1 over the thresholds induced by distinct scores.
pub fn f1_max(scores: &[f32], labels: &[bool]) -> MetricResult<f64> {
    let (pos, _) = class_counts(scores, labels)?;
    let idx = sorted_desc(scores);
    let n = idx.len();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut best = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let f1 = 2.0 * tp as f64 / (tp + fp + pos) as f64;
        if f1 > best {
            best = f1;
        }
        i = j;
    }
    Ok(best)
}

/// 8-connected component labels for a binary mask: 0 is background,
/// components are numbered 1..=count in scan order.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> (Vec<u32>, usize) {
    assert_eq!(mask.len(), h * w, "mask length does not match extent");
    let mut labels = vec![0u32; h * w];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && labels[q] == 0 {
                        labels[q] = count;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// Area under the mean per-region-overlap curve against global FPR,
/// integrated (trapezoidal) from 0 to `fpr_limit` and normalized by it.
/// Masks are binarized at 0.5; regions are 8-connected components.
pub fn aupro(maps: &[Tensor], masks: &[Tensor], fpr_limit: f64) -> MetricResult<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(MetricError::InvalidLimit);
    }
    if maps.is_empty() {
        return Err(MetricError::Empty);
    }
    if maps.len() != masks.len() {
        return Err(MetricError::LengthMismatch { scores: maps.len(), labels: masks.len() });
    }
    // region id per pixel, 0 for negatives; ids run across all images
    let mut pixels: Vec<(f32, u32)> = Vec::new();
    let mut region_sizes: Vec<f64> = Vec::new();
    let mut total_neg = 0usize;
    for (map, mask) in maps.iter().zip(masks) {
        let (h, w) = map.dims2("aupro map").map_err(|_| MetricError::ShapeMismatch)?;
        if mask.shape() != map.shape() {
            return Err(MetricError::ShapeMismatch);
        }
        if map.data().iter().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFiniteScore);
        }
        let bits: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
        let (labels, count) = connected_components(&bits, h, w);
        let base = region_sizes.len() as u32;
        let mut sizes = vec![0.0f64; count];
        for &l in &labels {
            if l > 0 {
                sizes[(l - 1) as usize] += 1.0;
            }
        }
        region_sizes.extend(sizes);
        for (i, &score) in map.data().iter().enumerate() {
            let region = if labels[i] > 0 { base + labels[i] } else { 0 };
            if region == 0 {
                total_neg += 1;
            }
            pixels.push((score, region));
        }
    }
    if region_sizes.is_empty() {
        return Err(MetricError::NoRegions);
    }
    if total_neg == 0 {
        return Err(MetricError::NoNegatives);
    }
    pixels.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let regions = region_sizes.len() as f64;
    let mut overlap_sum = 0.0f64;
    let mut fp = 0usize;
    let mut area = 0.0f64;
    let mut prev = (0.0f64, 0.0f64);
    let mut i = 0;
    let n = pixels.len();
    'sweep: while i < n {
        let mut j = i;
        while j < n && pixels[j].0 == pixels[i].0 {
            j += 1;
        }
        for &(_, region) in &pixels[i..j] {
            if region == 0 {
                fp += 1;
            } else {
                overlap_sum += 1.0 / region_sizes[(region - 1) as usize];
            }
        }
        let fpr = fp as f64 / total_neg as f64;
        let pro = overlap_sum / regions;
        if fpr <= fpr_limit {
            area += (fpr - prev.0) * (pro + prev.1) / 2.0;
            prev = (fpr, pro);
        } else {
            // crossed the limit: close with the interpolated boundary point
            let t = (fpr_limit - prev.0) / (fpr - prev.0);
            let pro_at_limit = prev.1 + t * (pro - prev.1);
            area += (fpr_limit - prev.0) * (pro_at_limit + prev.1) / 2.0;
            break 'sweep;
        }
        i = j;
    }
    Ok(area / fpr_limit)
}

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;

/// Detection and localization metrics for one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub image_auroc: f64,
    pub image_ap: f64,
    pub image_f1max: f64,
    pub pixel_auroc: f64,
    pub pixel_ap: f64,
    pub pixel_f1max: f64,
    pub pixel_aupro: f64,
}

impl MetricsReport {
    /// Image metrics from per-image scores and labels; pixel metrics from
    /// flattened maps against binarized masks; region overlap from the
    /// per-image pairs.
    pub fn compute(
        image_scores: &[f32],
        image_labels: &[bool],
        maps: &[Tensor],
        masks: &[Tensor],
        fpr_limit: f64,
    ) -> MetricResult<MetricsReport> {
        let mut pixel_scores = Vec::new();
        let mut pixel_labels = Vec::new();
        if maps.len() != masks.len() {
            return Err(MetricError::LengthMismatch { scores: maps.len(), labels: masks.len() });
        }
        for (map, mask) in maps.iter().zip(masks) {
            if map.shape() != mask.shape() {
                return Err(MetricError::ShapeMismatch);
            }
            pixel_scores.extend_from_slice(map.data());
            pixel_labels.extend(mask.data().iter().map(|&v| v > 0.5));
        }
        Ok(MetricsReport {
            image_auroc: auroc(image_scores, image_labels)?,
            image_ap: average_precision(image_scores, image_labels)?,
            image_f1max: f1_max(image_scores, image_labels)?,
            pixel_auroc: auroc(&pixel_scores, &pixel_labels)?,
            pixel_ap: average_precision(&pixel_scores, &pixel_labels)?,
            pixel_f1max: f1_max(&pixel_scores, &pixel_labels)?,
            pixel_aupro: aupro(maps, masks, fpr_limit)?,
        })
    }
}
