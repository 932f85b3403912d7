//! Seeded stick-figure scenes in COCO format, a desk-scale stand-in for real
//! keypoint datasets.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::coco::{category_for, save_coco, AnnotationRecord, CocoDataset, CocoImage, BBOX_AREA_FACTOR};
use crate::error::{DataError, Result};
use crate::image::RgbImage;
use crate::schema::{Keypoint, KeypointSchema, KeypointSet, LABELED_VISIBLE};

/// One rendered figure with exact keypoints.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// Body-frame joint positions in torso units, infant layout order.
    pub joints: Vec<(f64, f64)>,
    pub rotation_deg: f64,
    /// Pixels per torso unit.
    pub scale: f64,
    pub translation: (f64, f64),
    pub image: RgbImage,
    pub keypoints: KeypointSet,
    pub bbox: [f64; 4],
}

fn limb_dir(side: f64, deg: f64) -> (f64, f64) {
    let (s, c) = deg.to_radians().sin_cos();
    (side * s, -c)
}

fn step(p: (f64, f64), d: (f64, f64), len: f64) -> (f64, f64) {
    (p.0 + d.0 * len, p.1 + d.1 * len)
}

/// Random articulated pose in the 21-point infant order (y up, torso = 1).
fn infant_pose(rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut j = vec![(0.0, 0.0); 21];
    let tilt = rng.random_range(-25.0..25.0f64);
    j[20] = (0.0, 0.0);
    j[11] = (0.0, 0.4);
    j[2] = (0.0, 1.0);
    let up = limb_dir(1.0, 180.0 + tilt);
    j[1] = step(j[2], up, 0.3);
    j[0] = step(j[2], up, 0.62);
    for (side, sh, el, wr, hand, hip, knee, ank, toe) in [(1.0, 3, 5, 7, 9, 12, 14, 16, 18), (-1.0, 4, 6, 8, 10, 13, 15, 17, 19)] {
        j[sh] = (side * 0.36, 0.95);
        let a1 = rng.random_range(15.0..160.0f64);
        let a2 = a1 + rng.random_range(-100.0..20.0f64);
        j[el] = step(j[sh], limb_dir(side, a1), 0.45);
        j[wr] = step(j[el], limb_dir(side, a2), 0.4);
        j[hand] = step(j[wr], limb_dir(side, a2 + rng.random_range(-20.0..20.0f64)), 0.14);
        j[hip] = (side * 0.2, -0.05);
        let b1 = rng.random_range(-5.0..60.0f64);
        let b2 = b1 + rng.random_range(-60.0..10.0f64);
        j[knee] = step(j[hip], limb_dir(side, b1), 0.5);
        j[ank] = step(j[knee], limb_dir(side, b2), 0.45);
        j[toe] = step(j[ank], limb_dir(side, b2 + 75.0), 0.14);
    }
    j
}

/// Project the infant-order joints onto `schema`'s layout.
fn to_schema(joints: &[(f64, f64)], schema: &KeypointSchema) -> Result<Vec<(f64, f64)>> {
    match schema.num_keypoints() {
        21 => Ok(joints.to_vec()),
        17 => {
            let nose = joints[1];
            let (dx, dy) = (joints[0].0 - joints[2].0, joints[0].1 - joints[2].1);
            let n = (dx * dx + dy * dy).sqrt();
            let (ux, uy) = (dx / n, dy / n);
            // lateral unit vector towards the figure's left (+x when upright)
            let (lx, ly) = (uy, -ux);
            let off = |a: f64, b: f64| (nose.0 + a * lx + b * ux, nose.1 + a * ly + b * uy);
            Ok(vec![
                nose,
                off(0.07, 0.08),
                off(-0.07, 0.08),
                off(0.15, 0.02),
                off(-0.15, 0.02),
                joints[3],
                joints[4],
                joints[5],
                joints[6],
                joints[7],
                joints[8],
                joints[12],
                joints[13],
                joints[14],
                joints[15],
                joints[16],
                joints[17],
            ])
        }
        k => Err(DataError::InvalidArgument(format!(
            "synthetic figures support 17 or 21 keypoints, schema {} has {k}",
            schema.name
        ))),
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let rgb = match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [rgb.0 as f32, rgb.1 as f32, rgb.2 as f32]
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((px - a.0) * vx + (py - a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (px - a.0 - t * vx, py - a.1 - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Blend a capsule of `radius` around segment `a`-`b` with coverage-based anti-aliasing.
fn draw_capsule(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), radius: f64, color: [f32; 3]) {
    let pad = radius + 1.0;
    let x0 = (a.0.min(b.0) - pad).floor().max(0.0) as usize;
    let y0 = (a.1.min(b.1) - pad).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + pad).ceil().max(0.0) as usize).min(img.width);
    let y1 = ((a.1.max(b.1) + pad).ceil().max(0.0) as usize).min(img.height);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, a, b);
            let cover = (radius + 0.5 - d).clamp(0.0, 1.0) as f32;
            if cover > 0.0 {
                for (c, &col) in color.iter().enumerate() {
                    let old = img.get(c, y, x);
                    img.set(c, y, x, old * (1.0 - cover) + col * cover);
                }
            }
        }
    }
}

/// Render one scene of `size = (width, height)` from `rng`.
pub fn render_scene(rng: &mut ChaCha8Rng, size: (usize, usize), schema: &KeypointSchema) -> Result<SyntheticScene> {
    let (w, h) = size;
    if w < 8 || h < 8 {
        return Err(DataError::InvalidArgument(format!("image size {w}x{h} is too small")));
    }
    let joints = infant_pose(rng);
    let body = to_schema(&joints, schema)?;
    let rotation_deg = rng.random_range(-60.0..60.0f64);
    let (sin, cos) = rotation_deg.to_radians().sin_cos();
    // rotate and flip y so the head points up in image space
    let rotated: Vec<(f64, f64)> = body
        .iter()
        .map(|&(x, y)| (cos * x + sin * y, sin * x - cos * y))
        .collect();
    let min_x = rotated.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let max_x = rotated.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let min_y = rotated.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let max_y = rotated.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (ew, eh) = ((max_x - min_x).max(1e-3), (max_y - min_y).max(1e-3));
    let fill = rng.random_range(0.5..0.8f64);
    let scale = fill * (w as f64 / ew).min(h as f64 / eh);
    let radius = (0.05 * scale).max(0.8);
    let margin = radius + 1.0;
    let slack_x = (w as f64 - scale * ew - 2.0 * margin).max(0.0);
    let slack_y = (h as f64 - scale * eh - 2.0 * margin).max(0.0);
    let tx = margin + rng.random::<f64>() * slack_x - scale * min_x;
    let ty = margin + rng.random::<f64>() * slack_y - scale * min_y;
    let pts: Vec<(f64, f64)> = rotated.iter().map(|&(x, y)| (tx + scale * x, ty + scale * y)).collect();

    let mut image = RgbImage::new(w, h);
    for v in image.data.iter_mut() {
        *v = rng.random_range(0.15..0.55f32);
    }
    let n_bones = schema.skeleton.len().max(1) as f64;
    for (b, &(i, j)) in schema.skeleton.iter().enumerate() {
        draw_capsule(&mut image, pts[i], pts[j], radius, hsv(b as f64 / n_bones, 0.85, 0.95));
    }
    let head = schema.keypoint_names.iter().position(|n| n == "nose").unwrap_or(0);
    draw_capsule(&mut image, pts[head], pts[head], 2.2 * radius, [0.95, 0.85, 0.7]);

    let keypoints = KeypointSet::new(pts.iter().map(|&(x, y)| Keypoint::new(x, y, LABELED_VISIBLE)).collect());
    let pad = radius + 0.05 * (scale * ew).max(scale * eh);
    let bx0 = (pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min) - pad).max(0.0);
    let by0 = (pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min) - pad).max(0.0);
    let bx1 = (pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max) + pad).min(w as f64);
    let by1 = (pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max) + pad).min(h as f64);
    Ok(SyntheticScene {
        joints,
        rotation_deg,
        scale,
        translation: (tx, ty),
        image,
        keypoints,
        bbox: [bx0, by0, bx1 - bx0, by1 - by0],
    })
}

/// Per-image generator: stream `index` of the ChaCha8 sequence keyed by `seed`.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn image_file_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// Render `n` scenes of `size = (width, height)` into memory.
pub fn synthesize(n: usize, seed: u64, size: (usize, usize), schema: &KeypointSchema) -> Result<Vec<SyntheticScene>> {
    if n == 0 {
        return Err(DataError::InvalidArgument("n must be at least 1".into()));
    }
    schema.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| render_scene(&mut scene_rng(seed, i as u64), size, schema))
        .collect()
}

/// COCO dataset describing `scenes`, image `i` stored as [`image_file_name`]`(i)`.
pub fn scenes_to_dataset(scenes: &[SyntheticScene], schema: &KeypointSchema) -> CocoDataset {
    let images = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| CocoImage {
            id: i as u64 + 1,
            file_name: image_file_name(i),
            width: s.image.width as u32,
            height: s.image.height as u32,
        })
        .collect();
    let annotations = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| AnnotationRecord {
            id: i as u64 + 1,
            image_id: i as u64 + 1,
            category_id: 1,
            keypoints: s.keypoints.clone(),
            area: s.bbox[2] * s.bbox[3] * BBOX_AREA_FACTOR,
            bbox: s.bbox,
            iscrowd: false,
            segmentation: None,
        })
        .collect();
    CocoDataset {
        images,
        annotations,
        categories: vec![category_for(schema)],
    }
}

/// Write `dir/images/*.png` and `dir/annotations.json`.
pub fn generate_synthetic(
    dir: impl AsRef<Path>,
    n: usize,
    seed: u64,
    size: (usize, usize),
    schema: &KeypointSchema,
) -> Result<CocoDataset> {
    let dir = dir.as_ref();
    let scenes = synthesize(n, seed, size, schema)?;
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| DataError::io(&images_dir, e))?;
    scenes
        .par_iter()
        .enumerate()
        .try_for_each(|(i, s)| s.image.save_png(images_dir.join(image_file_name(i))))?;
    let dataset = scenes_to_dataset(&scenes, schema);
    save_coco(dir.join("annotations.json"), &dataset)?;
    Ok(dataset)
}
