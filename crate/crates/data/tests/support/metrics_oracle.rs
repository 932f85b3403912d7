//! Independent reference implementation of keypoint similarity and COCO AP.

#![allow(dead_code)]

use aggpose_data::{AnnotationRecord, DetectionRecord, EvalParams, Keypoint, KeypointSchema, KeypointSet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const K: usize = 4;

pub fn schema() -> KeypointSchema {
    KeypointSchema {
        name: "test4".into(),
        keypoint_names: (0..K).map(|i| format!("p{i}")).collect(),
        k: vec![0.05, 0.08, 0.1, 0.12],
        flip_pairs: vec![(0, 1)],
        skeleton: vec![],
    }
}

pub fn ann(id: u64, image_id: u64, pts: Vec<Keypoint>, area: f64) -> AnnotationRecord {
    AnnotationRecord {
        id,
        image_id,
        category_id: 1,
        keypoints: KeypointSet::new(pts),
        area,
        bbox: [0.0, 0.0, 1.0, 1.0],
        iscrowd: false,
        segmentation: None,
    }
}

pub fn det(image_id: u64, pts: &[(f64, f64)], score: f64) -> DetectionRecord {
    DetectionRecord {
        image_id,
        keypoints: KeypointSet::new(pts.iter().map(|&(x, y)| Keypoint::new(x, y, 2)).collect()),
        score,
    }
}

/// Similarity straight from its definition.
pub fn oracle_oks(d: &DetectionRecord, g: &AnnotationRecord, k: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in 0..k.len() {
        let gp = g.keypoints.points[i];
        if gp.v == 0 {
            continue;
        }
        let dp = d.keypoints.points[i];
        let d2 = (dp.x - gp.x).powi(2) + (dp.y - gp.y).powi(2);
        sum += (-d2 / (2.0 * g.area * k[i] * k[i])).exp();
        n += 1.0;
    }
    sum / n
}

/// Best assignment by exhaustive search: in descending score order, each
/// detection's similarity is maximized before any later one is considered.
pub fn exhaustive_assignment(sims: &[Vec<f64>], threshold: f64) -> Vec<bool> {
    fn search(sims: &[Vec<f64>], t: f64, d: usize, used: &mut Vec<bool>, cur: &mut Vec<f64>, best: &mut Option<Vec<f64>>) {
        if d == sims.len() {
            let better = match best {
                None => true,
                Some(b) => cur.iter().zip(b.iter()).find(|(x, y)| x != y).is_some_and(|(x, y)| x > y),
            };
            if better {
                *best = Some(cur.clone());
            }
            return;
        }
        cur.push(-1.0);
        search(sims, t, d + 1, used, cur, best);
        cur.pop();
        for g in 0..used.len() {
            if !used[g] && sims[d][g] >= t {
                used[g] = true;
                cur.push(sims[d][g]);
                search(sims, t, d + 1, used, cur, best);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let n_gt = sims.first().map_or(0, |r| r.len());
    let mut best = None;
    search(sims, threshold, 0, &mut vec![false; n_gt], &mut Vec::new(), &mut best);
    best.unwrap().iter().map(|&v| v >= 0.0).collect()
}

/// AP and recall per threshold from per-detection hit flags.
pub fn oracle_ap(mut hits: Vec<(f64, bool)>, num_gt: usize) -> (f64, f64) {
    hits.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut tp = 0.0;
    let mut points = Vec::new();
    for (i, &(_, hit)) in hits.iter().enumerate() {
        if hit {
            tp += 1.0;
        }
        points.push((tp / num_gt as f64, tp / (i as f64 + 1.0)));
    }
    let mut ap = 0.0;
    for r in 0..101 {
        let level = r as f64 / 100.0;
        ap += points
            .iter()
            .filter(|(rc, _)| *rc >= level)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
    }
    (ap / 101.0, tp / num_gt as f64)
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<DetectionRecord>, Vec<AnnotationRecord>) {
    let n_images = rng.random_range(1..=3u64);
    let mut anns = Vec::new();
    let mut dets = Vec::new();
    for image in 1..=n_images {
        let n_gt = rng.random_range(0..=4);
        let mut centers = Vec::new();
        for _ in 0..n_gt {
            let (cx, cy) = (rng.random_range(0.0..60.0), rng.random_range(0.0..60.0));
            let pts: Vec<Keypoint> = (0..K)
                .map(|i| {
                    let v = if i == 0 || rng.random::<f64>() < 0.8 { 2 } else { 0 };
                    Keypoint::new(cx + rng.random_range(-8.0..8.0), cy + rng.random_range(-8.0..8.0), v)
                })
                .collect();
            centers.push(pts.clone());
            let id = anns.len() as u64 + 1;
            anns.push(ann(id, image, pts, rng.random_range(60.0..600.0)));
        }
        let n_det = rng.random_range(0..=5);
        for _ in 0..n_det {
            let pts: Vec<(f64, f64)> = if !centers.is_empty() && rng.random::<f64>() < 0.8 {
                let base = &centers[rng.random_range(0..centers.len())];
                let noise = rng.random_range(0.0..4.0);
                base.iter()
                    .map(|p| (p.x + noise * rng.random_range(-1.0..1.0), p.y + noise * rng.random_range(-1.0..1.0)))
                    .collect()
            } else {
                (0..K).map(|_| (rng.random_range(0.0..60.0), rng.random_range(0.0..60.0))).collect()
            };
            dets.push(det(image, &pts, rng.random()));
        }
    }
    if anns.is_empty() {
        anns.push(ann(1, 1, (0..K).map(|i| Keypoint::new(i as f64, 1.0, 2)).collect(), 100.0));
    }
    (dets, anns)
}

/// Mean AP, mean recall and per-threshold AP by exhaustive assignment.
pub fn oracle_summary(
    dets: &[DetectionRecord],
    anns: &[AnnotationRecord],
    schema: &KeypointSchema,
    params: &EvalParams,
) -> (f64, f64, Vec<f64>) {
    let mut aps = Vec::new();
    let mut recalls = Vec::new();
    for &t in &params.thresholds {
        let mut hits = Vec::new();
        let mut images: Vec<u64> = dets.iter().map(|d| d.image_id).chain(anns.iter().map(|a| a.image_id)).collect();
        images.sort();
        images.dedup();
        for image in images {
            let mut ds: Vec<&DetectionRecord> = dets.iter().filter(|d| d.image_id == image).collect();
            ds.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            let gs: Vec<&AnnotationRecord> = anns.iter().filter(|a| a.image_id == image).collect();
            let sims: Vec<Vec<f64>> = ds.iter().map(|d| gs.iter().map(|g| oracle_oks(d, g, &schema.k)).collect()).collect();
            let assigned = exhaustive_assignment(&sims, t);
            hits.extend(ds.iter().zip(assigned).map(|(d, h)| (d.score, h)));
        }
        let (ap, rc) = oracle_ap(hits, anns.len());
        aps.push(ap);
        recalls.push(rc);
    }
    let ap = aps.iter().sum::<f64>() / aps.len() as f64;
    let ar = recalls.iter().sum::<f64>() / recalls.len() as f64;
    (ap, ar, aps)
}
