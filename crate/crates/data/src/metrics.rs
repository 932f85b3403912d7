//! Object keypoint similarity and the COCO keypoint AP/AR protocol.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::coco::{AnnotationRecord, DetectionRecord};
use crate::schema::{KeypointSchema, KeypointSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("schema mismatch: {expected} keypoints expected, record has {found}")]
    SchemaMismatch { expected: usize, found: usize },
    #[error("similarity undefined: annotation has no labeled keypoints")]
    NoLabeledKeypoints,
    #[error("similarity undefined: annotation has non-positive area {0}")]
    NonPositiveArea(f64),
    #[error("metrics undefined: no annotations with labeled keypoints")]
    NoAnnotations,
}

/// Area ranges (px²) of the "all", "medium" and "large" buckets.
pub const AREA_ALL: (f64, f64) = (0.0, 1e10);
pub const AREA_MEDIUM: (f64, f64) = (32.0 * 32.0, 96.0 * 96.0);
pub const AREA_LARGE: (f64, f64) = (96.0 * 96.0, 1e10);

/// Number of evenly spaced recall points of the interpolated PR curve.
pub const RECALL_POINTS: usize = 101;

/// Similarity of predicted keypoints `det` to ground truth `gt` with object
/// area `area` (= s²): the mean over labeled ground-truth keypoints of
/// `exp(-d² / (2 s² k²))`.
pub fn oks_points(det: &KeypointSet, gt: &KeypointSet, area: f64, k: &[f64]) -> Result<f64, MetricsError> {
    if det.len() != k.len() || gt.len() != k.len() {
        return Err(MetricsError::SchemaMismatch {
            expected: k.len(),
            found: if det.len() != k.len() { det.len() } else { gt.len() },
        });
    }
    let labeled = gt.num_labeled();
    if labeled == 0 {
        return Err(MetricsError::NoLabeledKeypoints);
    }
    if !(area > 0.0) {
        return Err(MetricsError::NonPositiveArea(area));
    }
    let total: f64 = det
        .points
        .iter()
        .zip(&gt.points)
        .zip(k)
        .filter(|((_, g), _)| g.is_labeled())
        .map(|((d, g), &ki)| {
            let (dx, dy) = (d.x - g.x, d.y - g.y);
            (-(dx * dx + dy * dy) / (2.0 * area * ki * ki)).exp()
        })
        .sum();
    Ok(total / labeled as f64)
}

pub fn oks(det: &DetectionRecord, ann: &AnnotationRecord, schema: &KeypointSchema) -> Result<f64, MetricsError> {
    oks_points(&det.keypoints, &ann.keypoints, ann.area, &schema.k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub thresholds: Vec<f64>,
    pub max_dets: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            max_dets: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    /// `None` when no annotation falls in the medium bucket.
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    pub ar: f64,
    pub ar50: Option<f64>,
    pub ar75: Option<f64>,
    pub ar_m: Option<f64>,
    pub ar_l: Option<f64>,
    pub ap_per_threshold: Vec<f64>,
    pub num_annotations: usize,
    pub num_detections: usize,
}

/// Greedy COCO matching at one threshold.
///
/// `oks[d][g]` holds similarities with detections already sorted by
/// descending score. Each detection takes the unmatched annotation with the
/// highest similarity `>= threshold`; a non-ignored annotation is preferred
/// over an ignored one, so `gt_ignore` must list non-ignored annotations first.
/// Returns the matched annotation per detection.
pub fn match_detections(oks: &[Vec<f64>], gt_ignore: &[bool], threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gt_ignore.len()];
    oks.iter()
        .map(|row| {
            let mut best = threshold.min(1.0 - 1e-10);
            let mut found: Option<usize> = None;
            for (g, &sim) in row.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                if let Some(m) = found {
                    if !gt_ignore[m] && gt_ignore[g] {
                        break;
                    }
                }
                if sim < best {
                    continue;
                }
                best = sim;
                found = Some(g);
            }
            if let Some(g) = found {
                taken[g] = true;
            }
            found
        })
        .collect()
}

/// Per-image, per-area-range matching outcome.
#[derive(Debug, Clone)]
struct ImageResult {
    scores: Vec<f64>,
    /// `[threshold][detection]`
    matched: Vec<Vec<bool>>,
    ignored: Vec<Vec<bool>>,
    num_gt: usize,
}

fn keypoint_extent_area(kps: &KeypointSet) -> f64 {
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &kps.points {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    if x0.is_finite() {
        (x1 - x0) * (y1 - y0)
    } else {
        0.0
    }
}

fn match_image(
    sims: &[Vec<f64>],
    gts: &[&AnnotationRecord],
    dets: &[&DetectionRecord],
    range: (f64, f64),
    thresholds: &[f64],
) -> ImageResult {
    let out_of = |a: f64| a < range.0 || a > range.1;
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by_key(|&g| out_of(gts[g].area));
    let gt_ignore: Vec<bool> = order.iter().map(|&g| out_of(gts[g].area)).collect();
    let reordered: Vec<Vec<f64>> = sims
        .iter()
        .map(|row| order.iter().map(|&g| row[g]).collect())
        .collect();
    let dt_out: Vec<bool> = dets.iter().map(|d| out_of(keypoint_extent_area(&d.keypoints))).collect();

    let mut matched = Vec::with_capacity(thresholds.len());
    let mut ignored = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let m = match_detections(&reordered, &gt_ignore, t);
        matched.push(m.iter().map(Option::is_some).collect());
        ignored.push(
            m.iter()
                .zip(&dt_out)
                .map(|(g, &out)| match g {
                    Some(g) => gt_ignore[*g],
                    None => out,
                })
                .collect(),
        );
    }
    ImageResult {
        scores: dets.iter().map(|d| d.score).collect(),
        matched,
        ignored,
        num_gt: gt_ignore.iter().filter(|&&i| !i).count(),
    }
}

/// Interpolated AP and final recall per threshold; `None` without annotations.
fn accumulate(images: &[ImageResult], n_thr: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let num_gt: usize = images.iter().map(|r| r.num_gt).sum();
    if num_gt == 0 {
        return None;
    }
    let scores: Vec<f64> = images.iter().flat_map(|r| r.scores.iter().copied()).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable: equal scores keep image order
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));

    let mut aps = Vec::with_capacity(n_thr);
    let mut recalls = Vec::with_capacity(n_thr);
    for t in 0..n_thr {
        let matched: Vec<bool> = images.iter().flat_map(|r| r.matched[t].iter().copied()).collect();
        let ignored: Vec<bool> = images.iter().flat_map(|r| r.ignored[t].iter().copied()).collect();
        let (mut tp, mut fp) = (0.0f64, 0.0f64);
        let mut rc = Vec::new();
        let mut pr = Vec::new();
        for &i in &order {
            if ignored[i] {
                // ignored detections do not change the cumulative counts
            } else if matched[i] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            rc.push(tp / num_gt as f64);
            pr.push(if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 });
        }
        recalls.push(rc.last().copied().unwrap_or(0.0));
        for d in (0..pr.len().saturating_sub(1)).rev() {
            pr[d] = pr[d].max(pr[d + 1]);
        }
        let mut sum = 0.0;
        let mut ptr = 0;
        for r in 0..RECALL_POINTS {
            let thr = r as f64 / (RECALL_POINTS - 1) as f64;
            while ptr < rc.len() && rc[ptr] < thr {
                ptr += 1;
            }
            if ptr < rc.len() {
                sum += pr[ptr];
            }
        }
        aps.push(sum / RECALL_POINTS as f64);
    }
    Some((aps, recalls))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// COCO keypoint evaluation over all images referenced by `dets` or `anns`.
///
/// Crowd annotations and annotations without labeled keypoints take no part
/// in matching. Detections beyond `max_dets` per image (by score) are dropped.
pub fn evaluate(
    dets: &[DetectionRecord],
    anns: &[AnnotationRecord],
    schema: &KeypointSchema,
    params: &EvalParams,
) -> Result<EvalSummary, MetricsError> {
    let k = schema.num_keypoints();
    for n in anns.iter().map(|a| a.keypoints.len()).chain(dets.iter().map(|d| d.keypoints.len())) {
        if n != k {
            return Err(MetricsError::SchemaMismatch { expected: k, found: n });
        }
    }
    let valid: Vec<&AnnotationRecord> = anns
        .iter()
        .filter(|a| !a.iscrowd && a.keypoints.num_labeled() > 0)
        .collect();
    if valid.is_empty() {
        return Err(MetricsError::NoAnnotations);
    }
    for a in &valid {
        if !(a.area > 0.0) {
            return Err(MetricsError::NonPositiveArea(a.area));
        }
    }

    let mut by_image: BTreeMap<u64, (Vec<&AnnotationRecord>, Vec<&DetectionRecord>)> = BTreeMap::new();
    for a in &valid {
        by_image.entry(a.image_id).or_default().0.push(a);
    }
    for d in dets {
        by_image.entry(d.image_id).or_default().1.push(d);
    }
    let groups: Vec<(Vec<&AnnotationRecord>, Vec<&DetectionRecord>)> = by_image
        .into_values()
        .map(|(g, mut d)| {
            d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
            d.truncate(params.max_dets);
            (g, d)
        })
        .collect();

    let ranges = [AREA_ALL, AREA_MEDIUM, AREA_LARGE];
    let per_image: Vec<Vec<ImageResult>> = groups
        .par_iter()
        .map(|(gts, dts)| {
            let sims: Vec<Vec<f64>> = dts
                .iter()
                .map(|d| {
                    gts.iter()
                        .map(|g| oks_points(&d.keypoints, &g.keypoints, g.area, &schema.k).expect("validated"))
                        .collect()
                })
                .collect();
            ranges
                .iter()
                .map(|&r| match_image(&sims, gts, dts, r, &params.thresholds))
                .collect()
        })
        .collect();

    let n_thr = params.thresholds.len();
    let bucket = |ri: usize| {
        let results: Vec<ImageResult> = per_image.iter().map(|v| v[ri].clone()).collect();
        accumulate(&results, n_thr)
    };
    let (aps, recalls) = bucket(0).expect("valid annotations exist");
    let medium = bucket(1);
    let large = bucket(2);
    let at = |v: &[f64], t: f64| {
        params
            .thresholds
            .iter()
            .position(|&x| (x - t).abs() < 1e-12)
            .map(|i| v[i])
    };
    Ok(EvalSummary {
        ap: mean(&aps),
        ap50: at(&aps, 0.5),
        ap75: at(&aps, 0.75),
        ap_m: medium.as_ref().map(|(a, _)| mean(a)),
        ap_l: large.as_ref().map(|(a, _)| mean(a)),
        ar: mean(&recalls),
        ar50: at(&recalls, 0.5),
        ar75: at(&recalls, 0.75),
        ar_m: medium.as_ref().map(|(_, r)| mean(r)),
        ar_l: large.as_ref().map(|(_, r)| mean(r)),
        ap_per_threshold: aps,
        num_annotations: valid.len(),
        num_detections: groups.iter().map(|(_, d)| d.len()).sum(),
    })
}
