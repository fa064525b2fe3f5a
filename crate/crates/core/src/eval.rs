//! Confidence-ranked greedy matching, precision/recall curves and COCO-style
//! average precision.
//!
//! Matching follows the COCO evaluator: detections are visited in descending
//! confidence (ties by input order) and each one claims the best still-free
//! ground truth of the same image and category whose IoU reaches the
//! threshold. Precision is interpolated on the 101-point recall grid.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::coco::{DatasetBundle, Detection, GroundTruthObject};
use crate::geometry::{iou, SizeCategory};

/// Number of recall points used by the interpolated AP.
pub const RECALL_POINTS: usize = 101;

/// Slack on the `iou >= threshold` test. Centered scaling by an area factor
/// goes through a square root, so an IoU that is exactly 0.5 in exact arithmetic can
/// land one ulp below it.
pub const IOU_MATCH_TOLERANCE: f64 = 1e-10;

/// IoU threshold at which detections are paired for the size census.
pub const CENSUS_MIN_IOU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no ground-truth objects for the requested categories")]
    EmptyGroundTruth,
    #[error("IoU threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("at least one IoU threshold is required")]
    NoThresholds,
}

/// The ten COCO thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

fn check_threshold(t: f64) -> Result<(), EvalError> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(EvalError::InvalidThreshold(t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionMatch {
    /// Index into the detection slice passed to [`match_detections`].
    pub detection: usize,
    pub confidence: f64,
    pub matched_gt: Option<u64>,
    /// IoU with the matched ground truth, 0 when unmatched.
    pub iou: f64,
    pub true_positive: bool,
    /// Excluded from precision/recall (matched an ignored object, or an
    /// unmatched detection outside the evaluated size range).
    pub ignored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub threshold: f64,
    /// One entry per detection, in processing (descending confidence) order.
    pub matches: Vec<DetectionMatch>,
    /// Ground-truth objects that count towards recall.
    pub num_gt: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub threshold: f64,
    pub points: Vec<PrPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdAp {
    pub threshold: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApReport {
    pub ap: f64,
    /// AP at IoU 0.50, when that threshold was evaluated.
    pub ap50: Option<f64>,
    pub per_threshold: Vec<ThresholdAp>,
    pub per_size: BTreeMap<SizeCategory, f64>,
    pub categories_evaluated: usize,
}

impl ApReport {
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold
            .iter()
            .find(|t| (t.threshold - threshold).abs() < 1e-12)
            .map(|t| t.ap)
    }

    /// Flat `metric,threshold,size,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,threshold,size,value\n");
        out.push_str(&format!("ap,all,all,{}\n", self.ap));
        if let Some(ap50) = self.ap50 {
            out.push_str(&format!("ap50,0.5,all,{ap50}\n"));
        }
        for t in &self.per_threshold {
            out.push_str(&format!("ap_at,{},all,{}\n", t.threshold, t.ap));
        }
        for (size, ap) in &self.per_size {
            out.push_str(&format!("ap,all,{size},{ap}\n"));
        }
        out
    }
}

/// Descending confidence, ties by ascending index.
fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    order
}

/// Per detection, the same-image same-category ground truths it overlaps,
/// in ground-truth order, with their IoU.
fn overlaps(dets: &[Detection], gts: &[GroundTruthObject]) -> Vec<Vec<(usize, f64)>> {
    let mut groups: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        groups.entry((g.image_id, g.category_id)).or_default().push(i);
    }
    dets.iter()
        .map(|det| {
            groups
                .get(&(det.image_id, det.category_id))
                .map(|cands| {
                    cands
                        .iter()
                        .filter_map(|&gi| {
                            let v = iou(&det.bbox, &gts[gi].bbox);
                            (v > 0.0).then_some((gi, v))
                        })
                        .collect()
                })
                .unwrap_or_default()
        })
        .collect()
}

fn match_impl(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    overlaps: &[Vec<(usize, f64)>],
    gt_ignored: &[bool],
    det_outside_range: &dyn Fn(&Detection) -> bool,
    threshold: f64,
) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::with_capacity(dets.len());

    for di in confidence_order(dets) {
        let det = &dets[di];
        // (gt index, iou) of the best candidate, tracked separately for
        // counted and ignored objects; counted objects take precedence.
        let mut best: Option<(usize, f64)> = None;
        let mut best_ignored: Option<(usize, f64)> = None;
        for &(gi, v) in &overlaps[di] {
            if taken[gi] || v < threshold - IOU_MATCH_TOLERANCE {
                continue;
            }
            let slot = if gt_ignored[gi] { &mut best_ignored } else { &mut best };
            if slot.is_none_or(|(_, b)| v > b) {
                *slot = Some((gi, v));
            }
        }
        let chosen = best.or(best_ignored);
        let entry = match chosen {
            Some((gi, v)) => {
                taken[gi] = true;
                DetectionMatch {
                    detection: di,
                    confidence: det.confidence,
                    matched_gt: Some(gts[gi].annotation_id),
                    iou: v,
                    true_positive: !gt_ignored[gi],
                    ignored: gt_ignored[gi],
                }
            }
            None => DetectionMatch {
                detection: di,
                confidence: det.confidence,
                matched_gt: None,
                iou: 0.0,
                true_positive: false,
                ignored: det_outside_range(det),
            },
        };
        matches.push(entry);
    }

    MatchResult {
        threshold,
        matches,
        num_gt: gt_ignored.iter().filter(|&&ig| !ig).count(),
    }
}

/// Greedy confidence-ranked matching at a single IoU threshold.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthObject], threshold: f64) -> Result<MatchResult, EvalError> {
    check_threshold(threshold)?;
    let ignored = vec![false; gts.len()];
    Ok(match_impl(dets, gts, &overlaps(dets, gts), &ignored, &|_| false, threshold))
}

/// Cumulative precision/recall after each counted detection.
pub fn pr_curve(m: &MatchResult) -> Result<PrCurve, EvalError> {
    if m.num_gt == 0 {
        return Err(EvalError::EmptyGroundTruth);
    }
    let n = m.num_gt as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let points = m
        .matches
        .iter()
        .filter(|d| !d.ignored)
        .map(|d| {
            if d.true_positive {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                recall: tp as f64 / n,
                precision: tp as f64 / (tp + fp) as f64,
            }
        })
        .collect();
    Ok(PrCurve {
        threshold: m.threshold,
        points,
    })
}

/// 101-point interpolated AP: mean over r in {0, 0.01, ..., 1} of the best
/// precision reached at recall >= r (0 when r is never reached).
pub fn average_precision(curve: &PrCurve) -> f64 {
    // Right-to-left running maximum gives the precision envelope.
    let mut envelope: Vec<f64> = curve.points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..RECALL_POINTS {
        let r = i as f64 / (RECALL_POINTS - 1) as f64;
        while k < curve.points.len() && curve.points[k].recall < r {
            k += 1;
        }
        if k < curve.points.len() {
            sum += envelope[k];
        }
    }
    sum / RECALL_POINTS as f64
}

/// AP per threshold for one category, or `None` if nothing counts towards recall.
fn category_aps(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    size: Option<SizeCategory>,
    thresholds: &[f64],
) -> Option<Vec<f64>> {
    let ignored: Vec<bool> = gts
        .iter()
        .map(|g| size.is_some_and(|s| g.size_category != s))
        .collect();
    if ignored.iter().all(|&ig| ig) {
        return None;
    }
    let outside = |d: &Detection| size.is_some_and(|s| d.bbox.size_category() != s);
    let pairs = overlaps(dets, gts);
    let aps = thresholds
        .iter()
        .map(|&t| {
            let m = match_impl(dets, gts, &pairs, &ignored, &outside, t);
            // num_gt > 0 is guaranteed above
            let curve = pr_curve(&m).expect("non-empty ground truth");
            average_precision(&curve)
        })
        .collect();
    Some(aps)
}

/// Per-threshold AP averaged over categories, in ascending category order.
fn mean_over_categories(
    by_category: &[(Vec<Detection>, Vec<GroundTruthObject>)],
    size: Option<SizeCategory>,
    thresholds: &[f64],
) -> Option<(Vec<f64>, usize)> {
    let per_cat: Vec<Option<Vec<f64>>> = by_category
        .par_iter()
        .map(|(d, g)| category_aps(d, g, size, thresholds))
        .collect();
    let counted: Vec<&Vec<f64>> = per_cat.iter().flatten().collect();
    if counted.is_empty() {
        return None;
    }
    let n = counted.len() as f64;
    let means = (0..thresholds.len())
        .map(|ti| counted.iter().map(|aps| aps[ti]).sum::<f64>() / n)
        .collect();
    Some((means, counted.len()))
}

/// AP over all categories that have ground truth. The overall `ap` is the
/// mean of the per-threshold values.
pub fn evaluate(dets: &[Detection], bundle: &DatasetBundle, thresholds: &[f64]) -> Result<ApReport, EvalError> {
    if thresholds.is_empty() {
        return Err(EvalError::NoThresholds);
    }
    for &t in thresholds {
        check_threshold(t)?;
    }

    let categories: BTreeSet<u64> = bundle
        .ground_truth
        .iter()
        .map(|g| g.category_id)
        .collect();
    let by_category: Vec<(Vec<Detection>, Vec<GroundTruthObject>)> = categories
        .iter()
        .map(|&c| {
            let d = dets.iter().filter(|d| d.category_id == c).copied().collect();
            let g = bundle.ground_truth.iter().filter(|g| g.category_id == c).cloned().collect();
            (d, g)
        })
        .collect();

    let (means, categories_evaluated) =
        mean_over_categories(&by_category, None, thresholds).ok_or(EvalError::EmptyGroundTruth)?;
    let per_threshold: Vec<ThresholdAp> = thresholds
        .iter()
        .zip(&means)
        .map(|(&threshold, &ap)| ThresholdAp { threshold, ap })
        .collect();
    let ap = means.iter().sum::<f64>() / means.len() as f64;
    let ap50 = per_threshold
        .iter()
        .find(|t| (t.threshold - 0.5).abs() < 1e-12)
        .map(|t| t.ap);

    let mut per_size = BTreeMap::new();
    for size in SizeCategory::ALL {
        if let Some((m, _)) = mean_over_categories(&by_category, Some(size), thresholds) {
            per_size.insert(size, m.iter().sum::<f64>() / m.len() as f64);
        }
    }

    Ok(ApReport {
        ap,
        ap50,
        per_threshold,
        per_size,
        categories_evaluated,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SizeCounts {
    pub larger: usize,
    pub smaller: usize,
    pub equal: usize,
}

impl SizeCounts {
    pub fn total(&self) -> usize {
        self.larger + self.smaller + self.equal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub iou_lower: f64,
    pub iou_upper: f64,
    #[serde(flatten)]
    pub counts: SizeCounts,
}

/// Counts of predictions larger/smaller than their matched ground truth,
/// split into seven IoU intervals from 0.3 to 1.0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeRatioHistogram {
    pub bins: Vec<HistogramBin>,
    /// Same bins restricted by the ground truth's size category.
    pub per_size: BTreeMap<SizeCategory, Vec<HistogramBin>>,
    /// Detections with no partner at IoU >= 0.3.
    pub excluded: usize,
}

const CENSUS_BINS: usize = 7;

fn empty_bins() -> Vec<HistogramBin> {
    (0..CENSUS_BINS)
        .map(|i| HistogramBin {
            iou_lower: (3 + i) as f64 / 10.0,
            iou_upper: (4 + i) as f64 / 10.0,
            counts: SizeCounts::default(),
        })
        .collect()
}

fn census_bin(v: f64) -> usize {
    // Last bin is closed at 1.0.
    (1..CENSUS_BINS)
        .rev()
        .find(|&i| v >= (3 + i) as f64 / 10.0)
        .unwrap_or(0)
}

impl SizeRatioHistogram {
    pub fn totals(&self) -> SizeCounts {
        self.bins.iter().fold(SizeCounts::default(), |acc, b| SizeCounts {
            larger: acc.larger + b.counts.larger,
            smaller: acc.smaller + b.counts.smaller,
            equal: acc.equal + b.counts.equal,
        })
    }

    /// `size,iou_lower,iou_upper,larger,smaller,equal` rows; `size` is `all`
    /// for the overall bins.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,iou_lower,iou_upper,larger,smaller,equal\n");
        let mut rows = |label: &str, bins: &[HistogramBin]| {
            for b in bins {
                out.push_str(&format!(
                    "{label},{},{},{},{},{}\n",
                    b.iou_lower, b.iou_upper, b.counts.larger, b.counts.smaller, b.counts.equal
                ));
            }
        };
        rows("all", &self.bins);
        for (size, bins) in &self.per_size {
            rows(size.as_str(), bins);
        }
        out
    }
}

/// Census of predicted box sizes relative to their matched ground truth.
pub fn size_ratio_histogram(dets: &[Detection], bundle: &DatasetBundle) -> SizeRatioHistogram {
    let gts = &bundle.ground_truth;
    let by_id: HashMap<u64, &GroundTruthObject> = gts.iter().map(|g| (g.annotation_id, g)).collect();
    let m = match_detections(dets, gts, CENSUS_MIN_IOU).expect("census threshold is valid");

    let mut bins = empty_bins();
    let mut per_size: BTreeMap<SizeCategory, Vec<HistogramBin>> =
        SizeCategory::ALL.iter().map(|&s| (s, empty_bins())).collect();
    let mut excluded = 0;
    for dm in &m.matches {
        let Some(gt) = dm.matched_gt.and_then(|id| by_id.get(&id)) else {
            excluded += 1;
            continue;
        };
        let det_area = dets[dm.detection].bbox.area();
        let gt_area = gt.bbox.area();
        let bin = census_bin(dm.iou);
        for counts in [&mut bins[bin].counts, &mut per_size.get_mut(&gt.size_category).unwrap()[bin].counts] {
            if det_area > gt_area {
                counts.larger += 1;
            } else if det_area < gt_area {
                counts.smaller += 1;
            } else {
                counts.equal += 1;
            }
        }
    }
    SizeRatioHistogram {
        bins,
        per_size,
        excluded,
    }
}
