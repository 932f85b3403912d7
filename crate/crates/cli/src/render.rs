//! Heatmap overlays for visual inspection.

use aggpose_core::codec::DecodedKeypoint;
use aggpose_data::{InstanceSample, Normalization, RgbImage};
use aggpose_tensor::{Scalar, Tensor};

const HEAT_COLOR: [f32; 3] = [1.0, 0.1, 0.05];
const MARK_COLOR: [f32; 3] = [0.1, 1.0, 0.2];
const HEAT_ALPHA: f32 = 0.65;

/// The crop with the per-pixel maximum over all heatmap channels blended
/// in and a marker at each decoded keypoint.
pub fn overlay<T: Scalar>(
    sample: &InstanceSample,
    heatmaps: &Tensor<T>,
    decoded: &[DecodedKeypoint],
    norm: &Normalization,
) -> RgbImage {
    let (h, w) = sample.size();
    let (k, hh, hw) = (heatmaps.shape()[0], heatmaps.shape()[1], heatmaps.shape()[2]);
    let mut img = RgbImage::new(w, h);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = norm.invert(c, sample.image.data()[(c * h + y) * w + x]);
                img.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    let hd = heatmaps.data();
    for y in 0..h {
        for x in 0..w {
            let (cy, cx) = ((y * hh / h).min(hh - 1), (x * hw / w).min(hw - 1));
            let heat = (0..k)
                .map(|ch| hd[(ch * hh + cy) * hw + cx].to_f64() as f32)
                .fold(0.0f32, f32::max)
                .clamp(0.0, 1.0);
            let a = HEAT_ALPHA * heat;
            for (c, col) in HEAT_COLOR.iter().enumerate() {
                let old = img.get(c, y, x);
                img.set(c, y, x, old * (1.0 - a) + col * a);
            }
        }
    }
    for d in decoded.iter().filter(|d| !d.degenerate) {
        let (px, py) = (d.x.floor() as i64, d.y.floor() as i64);
        for (dx, dy) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (x, y) = (px + dx, py + dy);
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                for (c, col) in MARK_COLOR.iter().enumerate() {
                    img.set(c, y as usize, x as usize, *col);
                }
            }
        }
    }
    img
}
