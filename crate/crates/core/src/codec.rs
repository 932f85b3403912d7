//! Gaussian heatmap targets and quarter-offset peak decoding.
//!
//! Heatmap cell `(i, j)` covers input pixels `[4j, 4j+4) × [4i, 4i+4)` and is
//! sampled at its center, so input position `x` sits at heatmap coordinate `x / 4`.

use aggpose_data::{Keypoint, KeypointSet};
use aggpose_tensor::{Scalar, Tensor};

use crate::config::OUTPUT_STRIDE;

/// Default Gaussian spread in heatmap cells.
pub const DEFAULT_SIGMA: f64 = 2.0;

/// Per-keypoint targets `[K, H', W']` (peak exactly 1) and mask `[K]`.
pub fn encode<T: Scalar>(kps: &KeypointSet, size: (usize, usize), sigma: f64) -> (Tensor<T>, Vec<T>) {
    assert!(sigma > 0.0, "sigma must be positive");
    let (h, w) = size;
    let k = kps.len();
    let mut data = vec![T::zero(); k * h * w];
    let mut mask = vec![T::zero(); k];
    let two_s2 = 2.0 * sigma * sigma;
    for (c, p) in kps.points.iter().enumerate() {
        if !p.is_labeled() {
            continue;
        }
        let (u, v) = (p.x / OUTPUT_STRIDE as f64, p.y / OUTPUT_STRIDE as f64);
        let (cu, cv) = (u.floor(), v.floor());
        if !(cu >= 0.0 && cv >= 0.0 && cu < w as f64 && cv < h as f64) {
            continue;
        }
        mask[c] = T::one();
        let plane = &mut data[c * h * w..(c + 1) * h * w];
        let gx: Vec<f64> = (0..w).map(|j| (j as f64 + 0.5 - u).powi(2)).collect();
        for i in 0..h {
            let dy2 = (i as f64 + 0.5 - v).powi(2);
            for j in 0..w {
                plane[i * w + j] = T::from_f64((-(gx[j] + dy2) / two_s2).exp());
            }
        }
    }
    (Tensor::new(&[k, h, w], data).expect("target shape"), mask)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedKeypoint {
    /// Input-pixel coordinates.
    pub x: f64,
    pub y: f64,
    /// Peak heatmap value.
    pub confidence: f64,
    /// The channel was constant; the position is the grid center.
    pub degenerate: bool,
}

/// Decode one `[H', W']` channel.
pub fn decode_channel<T: Scalar>(plane: &[T], size: (usize, usize)) -> DecodedKeypoint {
    let (h, w) = size;
    let s = OUTPUT_STRIDE as f64;
    let at = |i: usize, j: usize| plane[i * w + j].to_f64();
    let mut best = 0;
    let mut all_equal = true;
    for (idx, v) in plane.iter().enumerate() {
        if v.to_f64() > plane[best].to_f64() {
            best = idx;
        }
        if v.to_f64() != plane[0].to_f64() {
            all_equal = false;
        }
    }
    if all_equal {
        return DecodedKeypoint {
            x: w as f64 / 2.0 * s,
            y: h as f64 / 2.0 * s,
            confidence: plane.first().map_or(0.0, |v| v.to_f64()),
            degenerate: true,
        };
    }
    let (i, j) = (best / w, best % w);
    let shift = |lo: f64, hi: f64| {
        if hi > lo {
            0.25
        } else if hi < lo {
            -0.25
        } else {
            0.0
        }
    };
    let dx = if j > 0 && j + 1 < w { shift(at(i, j - 1), at(i, j + 1)) } else { 0.0 };
    let dy = if i > 0 && i + 1 < h { shift(at(i - 1, j), at(i + 1, j)) } else { 0.0 };
    DecodedKeypoint {
        x: (j as f64 + 0.5 + dx) * s,
        y: (i as f64 + 0.5 + dy) * s,
        confidence: at(i, j),
        degenerate: false,
    }
}

/// Decode `[K, H', W']` heatmaps into one keypoint per channel.
pub fn decode<T: Scalar>(heatmaps: &Tensor<T>) -> Vec<DecodedKeypoint> {
    let shape = heatmaps.shape();
    assert_eq!(shape.len(), 3, "decode expects [K, H, W]");
    let (h, w) = (shape[1], shape[2]);
    heatmaps
        .data()
        .chunks(h * w)
        .map(|plane| decode_channel(plane, (h, w)))
        .collect()
}

/// Decoded keypoints as a set with every point marked visible.
pub fn to_keypoint_set(decoded: &[DecodedKeypoint]) -> KeypointSet {
    KeypointSet::new(
        decoded
            .iter()
            .map(|d| Keypoint::new(d.x, d.y, aggpose_data::schema::LABELED_VISIBLE))
            .collect(),
    )
}
