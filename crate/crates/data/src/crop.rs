//! Top-down instance crops and their augmentation.

use aggpose_tensor::Tensor;
use rand::Rng;

use crate::error::{DataError, Result};
use crate::geometry::Affine2;
use crate::image::{Normalization, RgbImage};
use crate::schema::{Keypoint, KeypointSchema, KeypointSet};

/// Standard full-size input `(height, width)`.
pub const INPUT_SIZE: (usize, usize) = (256, 192);
/// Input `(height, width)` of the toy configuration.
pub const TOY_INPUT_SIZE: (usize, usize) = (64, 48);
/// Box enlargement applied before cropping detector or ground-truth boxes.
pub const BBOX_PADDING: f64 = 1.25;

/// One normalized, cropped instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSample {
    /// `[3, H, W]`, normalized per channel; area outside the source image is 0.
    pub image: Tensor<f32>,
    /// Keypoints in crop coordinates.
    pub keypoints: KeypointSet,
    /// Source image → crop.
    pub forward: Affine2,
    /// Crop → source image.
    pub inverse: Affine2,
    /// Whether an odd number of flips was applied; keypoint labels are then
    /// exchanged along the schema's flip pairs relative to the source.
    pub flipped: bool,
}

impl InstanceSample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    /// Map crop-space keypoints back to source coordinates, undoing any
    /// label exchange caused by flips.
    pub fn to_source(&self, kps: &KeypointSet, schema: &KeypointSchema) -> KeypointSet {
        let back = transform_keypoints(kps, &self.inverse);
        if self.flipped {
            permute_keypoints(&back, &schema.flip_permutation())
        } else {
            back
        }
    }
}

pub fn transform_keypoints(kps: &KeypointSet, t: &Affine2) -> KeypointSet {
    KeypointSet::new(
        kps.points
            .iter()
            .map(|p| {
                let (x, y) = t.apply(p.x, p.y);
                Keypoint::new(x, y, p.v)
            })
            .collect(),
    )
}

/// `out[i] = kps[perm[i]]`.
pub fn permute_keypoints(kps: &KeypointSet, perm: &[usize]) -> KeypointSet {
    KeypointSet::new(perm.iter().map(|&j| kps.points[j]).collect())
}

/// Grow `[x, y, w, h]` about its center by `factor`.
pub fn expand_bbox(bbox: [f64; 4], factor: f64) -> [f64; 4] {
    let [x, y, w, h] = bbox;
    let (cx, cy) = (x + w / 2.0, y + h / 2.0);
    let (nw, nh) = (w * factor, h * factor);
    [cx - nw / 2.0, cy - nh / 2.0, nw, nh]
}

/// Affine map taking the aspect-adjusted `bbox` onto a `target = (H, W)` crop.
///
/// The shorter side of the box is extended until its aspect matches the
/// target, so the box center lands on the crop center with uniform scale.
pub fn crop_transform(bbox: [f64; 4], target: (usize, usize)) -> Result<Affine2> {
    let [x, y, w, h] = bbox;
    if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
        return Err(DataError::DegenerateBbox(bbox));
    }
    let (th, tw) = (target.0 as f64, target.1 as f64);
    let aspect = tw / th;
    let w_adj = if w / h > aspect { w } else { h * aspect };
    let s = tw / w_adj;
    let (cx, cy) = (x + w / 2.0, y + h / 2.0);
    Ok(Affine2::translation(-cx, -cy)
        .then(&Affine2::scaling(s, s))
        .then(&Affine2::translation(tw / 2.0, th / 2.0)))
}

/// Bilinear sample of channel `c` at continuous position `(x, y)`; taps
/// outside the image read `fill`.
fn sample(img: &RgbImage, c: usize, x: f64, y: f64, fill: f32) -> f32 {
    let fx = x - 0.5;
    let fy = y - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let ax = (fx - x0) as f32;
    let ay = (fy - y0) as f32;
    let tap = |xi: f64, yi: f64| -> f32 {
        if xi < 0.0 || yi < 0.0 || xi >= img.width as f64 || yi >= img.height as f64 {
            fill
        } else {
            img.get(c, yi as usize, xi as usize)
        }
    };
    let top = tap(x0, y0) * (1.0 - ax) + tap(x0 + 1.0, y0) * ax;
    let bottom = tap(x0, y0 + 1.0) * (1.0 - ax) + tap(x0 + 1.0, y0 + 1.0) * ax;
    top * (1.0 - ay) + bottom * ay
}

/// Warp `img` into an `(H, W)` crop through `forward` (source → crop).
fn warp(img: &RgbImage, inverse: &Affine2, target: (usize, usize), norm: &Normalization) -> Tensor<f32> {
    let (th, tw) = target;
    let mut data = vec![0.0f32; 3 * th * tw];
    for v in 0..th {
        for u in 0..tw {
            let (sx, sy) = inverse.apply(u as f64 + 0.5, v as f64 + 0.5);
            for c in 0..3 {
                let raw = sample(img, c, sx, sy, norm.mean[c]);
                data[(c * th + v) * tw + u] = norm.apply(c, raw);
            }
        }
    }
    Tensor::new(&[3, th, tw], data).expect("crop shape")
}

/// Crop the instance in `bbox = [x, y, w, h]` to `target = (H, W)`.
pub fn crop_instance(
    img: &RgbImage,
    bbox: [f64; 4],
    keypoints: &KeypointSet,
    target: (usize, usize),
    norm: &Normalization,
) -> Result<InstanceSample> {
    let forward = crop_transform(bbox, target)?;
    let inverse = forward.inverse().ok_or(DataError::DegenerateBbox(bbox))?;
    Ok(InstanceSample {
        image: warp(img, &inverse, target, norm),
        keypoints: transform_keypoints(keypoints, &forward),
        forward,
        inverse,
        flipped: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub rot_max_deg: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            rot_max_deg: 40.0,
            scale_range: (0.65, 1.35),
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            rot_max_deg: 0.0,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flip_prob <= 0.0 && self.rot_max_deg == 0.0 && self.scale_range == (1.0, 1.0)
    }
}

/// A concrete draw of the augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub rotation_deg: f64,
    pub scale: f64,
}

impl AugmentDraw {
    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let flip = cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob;
        let rotation_deg = if cfg.rot_max_deg > 0.0 {
            rng.random_range(-cfg.rot_max_deg..=cfg.rot_max_deg)
        } else {
            0.0
        };
        let (lo, hi) = cfg.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        AugmentDraw {
            flip,
            rotation_deg,
            scale,
        }
    }

    /// Crop-space map: flip, then rotate and scale about the crop center.
    pub fn transform(&self, size: (usize, usize)) -> Affine2 {
        let (h, w) = (size.0 as f64, size.1 as f64);
        let flip = if self.flip { Affine2::hflip(w) } else { Affine2::identity() };
        flip.then(&Affine2::translation(-w / 2.0, -h / 2.0))
            .then(&Affine2::rotation(self.rotation_deg))
            .then(&Affine2::scaling(self.scale, self.scale))
            .then(&Affine2::translation(w / 2.0, h / 2.0))
    }
}

/// Apply a fixed draw: warp the crop and compose the map into the stored transforms.
pub fn apply_augment(sample: &InstanceSample, draw: &AugmentDraw, schema: &KeypointSchema) -> InstanceSample {
    let size = sample.size();
    let t = draw.transform(size);
    let t_inv = t.inverse().expect("augmentation map is invertible");
    let (h, w) = size;
    let src = sample.image.data();
    let mut data = vec![0.0f32; src.len()];
    for v in 0..h {
        for u in 0..w {
            let (sx, sy) = t_inv.apply(u as f64 + 0.5, v as f64 + 0.5);
            let fx = sx - 0.5;
            let fy = sy - 0.5;
            let x0 = fx.floor();
            let y0 = fy.floor();
            let ax = (fx - x0) as f32;
            let ay = (fy - y0) as f32;
            for c in 0..3 {
                let tap = |xi: f64, yi: f64| -> f32 {
                    if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
                        0.0
                    } else {
                        src[(c * h + yi as usize) * w + xi as usize]
                    }
                };
                let top = tap(x0, y0) * (1.0 - ax) + tap(x0 + 1.0, y0) * ax;
                let bottom = tap(x0, y0 + 1.0) * (1.0 - ax) + tap(x0 + 1.0, y0 + 1.0) * ax;
                data[(c * h + v) * w + u] = top * (1.0 - ay) + bottom * ay;
            }
        }
    }
    let mut keypoints = transform_keypoints(&sample.keypoints, &t);
    if draw.flip {
        keypoints = permute_keypoints(&keypoints, &schema.flip_permutation());
    }
    let forward = sample.forward.then(&t);
    InstanceSample {
        image: Tensor::new(&[3, h, w], data).expect("crop shape"),
        keypoints,
        forward,
        inverse: forward.inverse().expect("composition of invertible maps"),
        flipped: sample.flipped ^ draw.flip,
    }
}

/// Random flip, rotation and scale about the crop center.
pub fn augment(
    sample: &InstanceSample,
    cfg: &AugmentConfig,
    schema: &KeypointSchema,
    rng: &mut impl Rng,
) -> InstanceSample {
    if cfg.is_identity() {
        return sample.clone();
    }
    let draw = AugmentDraw::sample(cfg, rng);
    apply_augment(sample, &draw, schema)
}
