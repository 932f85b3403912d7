use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};

/// Visibility flag of a labeled keypoint.
pub const UNLABELED: u8 = 0;
pub const LABELED_HIDDEN: u8 = 1;
pub const LABELED_VISIBLE: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// 0 unlabeled, 1 labeled but not visible, 2 labeled and visible.
    pub v: u8,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, v: u8) -> Self {
        Keypoint { x, y, v }
    }

    pub fn is_labeled(&self) -> bool {
        self.v > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn new(points: Vec<Keypoint>) -> Self {
        KeypointSet { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_labeled(&self) -> usize {
        self.points.iter().filter(|p| p.is_labeled()).count()
    }

    /// COCO flat layout `[x0, y0, v0, x1, y1, v1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.v as f64]).collect()
    }

    /// Parse the COCO flat layout; visibility values must be 0, 1 or 2.
    pub fn from_flat(flat: &[f64]) -> std::result::Result<Self, String> {
        if flat.len() % 3 != 0 {
            return Err(format!("keypoint array length {} is not a multiple of 3", flat.len()));
        }
        flat.chunks(3)
            .enumerate()
            .map(|(i, c)| {
                let v = c[2];
                if !(v == 0.0 || v == 1.0 || v == 2.0) {
                    return Err(format!("keypoint {i} has visibility {v}, expected 0, 1 or 2"));
                }
                if !(c[0].is_finite() && c[1].is_finite()) {
                    return Err(format!("keypoint {i} has non-finite coordinates"));
                }
                Ok(Keypoint::new(c[0], c[1], v as u8))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(KeypointSet::new)
    }
}

/// Keypoint layout plus the per-keypoint OKS constants `k_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSchema {
    pub name: String,
    pub keypoint_names: Vec<String>,
    /// Per-keypoint falloff constants `k_i` of the similarity measure.
    pub k: Vec<f64>,
    /// Left/right pairs exchanged by a horizontal flip.
    pub flip_pairs: Vec<(usize, usize)>,
    /// Bones drawn between keypoints, used by renderers only.
    #[serde(default)]
    pub skeleton: Vec<(usize, usize)>,
}

/// Per-keypoint standard deviations published with the COCO evaluation API.
pub const COCO_SIGMAS: [f64; 17] = [
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107, 0.107,
    0.087, 0.087, 0.089, 0.089,
];

/// Default uniform `k_i` of the infant layout.
pub const INFANT_DEFAULT_K: f64 = 0.08;

const COCO_NAMES: [&str; 17] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Provisional 21-point infant layout; names and order are placeholders
/// for a head-reduced body with hand, foot and navel points.
pub const INFANT_NAMES: [&str; 21] = [
    "head_top",
    "nose",
    "neck",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
    "navel",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "left_toe",
    "right_toe",
    "pelvis",
];

impl KeypointSchema {
    /// The 17-point COCO person layout. The COCO API scores with `2σ_i`,
    /// so `k_i = 2 · COCO_SIGMAS[i]`.
    pub fn coco17() -> Self {
        KeypointSchema {
            name: "coco".into(),
            keypoint_names: COCO_NAMES.iter().map(|s| s.to_string()).collect(),
            k: COCO_SIGMAS.iter().map(|s| 2.0 * s).collect(),
            flip_pairs: vec![(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)],
            skeleton: vec![
                (15, 13),
                (13, 11),
                (16, 14),
                (14, 12),
                (11, 12),
                (5, 11),
                (6, 12),
                (5, 6),
                (5, 7),
                (6, 8),
                (7, 9),
                (8, 10),
                (1, 2),
                (0, 1),
                (0, 2),
                (1, 3),
                (2, 4),
                (3, 5),
                (4, 6),
            ],
        }
    }

    /// The 21-point infant layout with the same `k` for every keypoint.
    pub fn infant21(k: f64) -> Self {
        KeypointSchema {
            name: "infant".into(),
            keypoint_names: INFANT_NAMES.iter().map(|s| s.to_string()).collect(),
            k: vec![k; 21],
            flip_pairs: vec![(3, 4), (5, 6), (7, 8), (9, 10), (12, 13), (14, 15), (16, 17), (18, 19)],
            skeleton: INFANT_BONES.to_vec(),
        }
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoint_names.len()
    }

    /// Resolve `coco`, `infant` or a path to a JSON schema file.
    pub fn resolve(spec: &str) -> Result<Self> {
        let schema = match spec {
            "coco" | "coco17" => Self::coco17(),
            "infant" | "infant21" => Self::infant21(INFANT_DEFAULT_K),
            path => {
                let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| DataError::json(path, e))?
            }
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_keypoints();
        let bad = |reason: String| Err(DataError::InvalidSchema { name: self.name.clone(), reason });
        if n == 0 {
            return bad("no keypoints".into());
        }
        if self.k.len() != n {
            return bad(format!("{} k constants for {n} keypoints", self.k.len()));
        }
        if let Some(k) = self.k.iter().find(|&&k| !(k > 0.0 && k.is_finite())) {
            return bad(format!("k constant {k} must be positive"));
        }
        let mut seen = vec![false; n];
        for &(a, b) in &self.flip_pairs {
            if a >= n || b >= n || a == b || seen[a] || seen[b] {
                return bad(format!("flip pair ({a}, {b}) does not form an involution"));
            }
            seen[a] = true;
            seen[b] = true;
        }
        Ok(())
    }

    /// Index permutation applied by a horizontal flip.
    pub fn flip_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.num_keypoints()).collect();
        for &(a, b) in &self.flip_pairs {
            perm.swap(a, b);
        }
        perm
    }
}

/// Bones of the infant layout, indices into [`INFANT_NAMES`].
pub const INFANT_BONES: [(usize, usize); 20] = [
    (20, 11),
    (11, 2),
    (2, 1),
    (1, 0),
    (2, 3),
    (2, 4),
    (3, 5),
    (5, 7),
    (7, 9),
    (4, 6),
    (6, 8),
    (8, 10),
    (20, 12),
    (20, 13),
    (12, 14),
    (14, 16),
    (16, 18),
    (13, 15),
    (15, 17),
    (17, 19),
];
