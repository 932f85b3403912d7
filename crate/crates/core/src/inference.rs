//! Dataset directories, instance preparation, evaluation and single-image inference.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use aggpose_data::coco::{load_coco_keypoints, CocoBox, CocoImage, CocoResult};
use aggpose_data::crop::expand_bbox;
use aggpose_data::metrics::EvalParams;
use aggpose_data::{
    crop_instance, evaluate, AnnotationRecord, CocoDataset, DetectionRecord, EvalSummary, InstanceSample,
    KeypointSchema, KeypointSet, Normalization, RgbImage,
};
use aggpose_tensor::{Scalar, Tensor};
use rayon::prelude::*;

use crate::codec::{decode, to_keypoint_set, DecodedKeypoint};
use crate::config::OUTPUT_STRIDE;
use crate::error::{CoreError, Result};
use crate::model::Model;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";

/// Instances predicted per forward pass.
const PREDICT_CHUNK: usize = 16;

/// A dataset directory: `annotations.json` plus `images/`.
#[derive(Debug, Clone)]
pub struct PoseDataset {
    pub root: PathBuf,
    pub coco: CocoDataset,
    pub schema: KeypointSchema,
}

impl PoseDataset {
    pub fn load(root: impl AsRef<Path>, schema: &KeypointSchema) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let coco = load_coco_keypoints(root.join(ANNOTATIONS_FILE), schema)?;
        Ok(PoseDataset {
            root,
            coco,
            schema: schema.clone(),
        })
    }

    pub fn from_annotations(annotations: impl AsRef<Path>, images: impl AsRef<Path>, schema: &KeypointSchema) -> Result<Self> {
        let coco = load_coco_keypoints(annotations, schema)?;
        Ok(PoseDataset {
            root: images.as_ref().to_path_buf(),
            coco,
            schema: schema.clone(),
        })
    }

    pub fn image_path(&self, image: &CocoImage) -> PathBuf {
        let nested = self.root.join(IMAGES_DIR).join(&image.file_name);
        if nested.exists() {
            nested
        } else {
            self.root.join(&image.file_name)
        }
    }

    /// Split by image id: the last `holdout` images form the second part.
    /// With `holdout == 0` both parts are the whole set.
    pub fn split(&self, holdout: usize) -> Result<(Vec<AnnotationRecord>, Vec<AnnotationRecord>)> {
        if holdout == 0 {
            return Ok((self.coco.annotations.clone(), self.coco.annotations.clone()));
        }
        let mut ids: Vec<u64> = self.coco.images.iter().map(|im| im.id).collect();
        ids.sort_unstable();
        if holdout >= ids.len() {
            return Err(CoreError::Config(format!("holdout {holdout} leaves no training images out of {}", ids.len())));
        }
        let cut = ids[ids.len() - holdout];
        let (val, train) = self.coco.annotations.iter().cloned().partition(|a| a.image_id >= cut);
        Ok((train, val))
    }
}

/// Whether an annotation takes part in training and evaluation.
pub fn is_usable(a: &AnnotationRecord) -> bool {
    !a.iscrowd && a.keypoints.num_labeled() > 0
}

/// One crop to predict, with the image it came from.
#[derive(Debug, Clone)]
pub struct Instance {
    pub image_id: u64,
    pub sample: InstanceSample,
}

/// Crop every box in `boxes` (`image_id`, `[x, y, w, h]`, keypoints in source
/// coordinates) to `input = (H, W)`. Images are decoded once each.
pub fn prepare_instances(
    ds: &PoseDataset,
    boxes: &[(u64, [f64; 4], KeypointSet)],
    input: (usize, usize),
    padding: f64,
    norm: &Normalization,
) -> Result<Vec<Instance>> {
    let images = ds.coco.image_index();
    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, (id, _, _)) in boxes.iter().enumerate() {
        by_image.entry(*id).or_default().push(i);
    }
    let groups: Vec<(u64, Vec<usize>)> = by_image.into_iter().collect();
    let cropped: Vec<Vec<(usize, Instance)>> = groups
        .par_iter()
        .map(|(id, members)| -> Result<Vec<(usize, Instance)>> {
            let meta = images
                .get(id)
                .ok_or_else(|| CoreError::Config(format!("box refers to unknown image id {id}")))?;
            let img = RgbImage::load(ds.image_path(meta))?;
            members
                .iter()
                .map(|&i| {
                    let (_, bbox, kps) = &boxes[i];
                    let sample = crop_instance(&img, expand_bbox(*bbox, padding), kps, input, norm)?;
                    Ok((i, Instance { image_id: *id, sample }))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<(usize, Instance)> = cropped.into_iter().flatten().collect();
    out.sort_by_key(|(i, _)| *i);
    Ok(out.into_iter().map(|(_, inst)| inst).collect())
}

/// Ground-truth boxes of usable annotations.
pub fn gt_boxes(anns: &[AnnotationRecord]) -> Vec<(u64, [f64; 4], KeypointSet)> {
    anns.iter()
        .filter(|a| is_usable(a))
        .map(|a| (a.image_id, a.bbox, a.keypoints.clone()))
        .collect()
}

/// Detector boxes; keypoints are unknown and left unlabeled.
pub fn detector_boxes(boxes: &[CocoBox], num_keypoints: usize) -> Vec<(u64, [f64; 4], KeypointSet)> {
    let empty = KeypointSet::new(vec![aggpose_data::Keypoint::new(0.0, 0.0, 0); num_keypoints]);
    boxes.iter().map(|b| (b.image_id, b.bbox, empty.clone())).collect()
}

/// Predicted instances plus the annotations they are scored against.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub instances: Vec<Instance>,
    pub annotations: Vec<AnnotationRecord>,
}

impl EvalSet {
    /// Crops at the ground-truth boxes of `anns`.
    pub fn from_gt(ds: &PoseDataset, anns: &[AnnotationRecord], input: (usize, usize), padding: f64) -> Result<Self> {
        let instances = prepare_instances(ds, &gt_boxes(anns), input, padding, &Normalization::default())?;
        Ok(EvalSet {
            instances,
            annotations: anns.to_vec(),
        })
    }
}

/// Heatmaps `[K, H/4, W/4]` for every sample, batched.
pub fn predict_samples<T: Scalar>(model: &Model<T>, samples: &[&InstanceSample]) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_CHUNK) {
        let (h, w) = chunk[0].size();
        let data: Vec<T> = chunk
            .iter()
            .flat_map(|s| s.image.data().iter().map(|&v| T::from_f64(v as f64)))
            .collect();
        let heat = model.predict(Tensor::new(&[chunk.len(), 3, h, w], data)?)?;
        let per = heat.numel() / chunk.len();
        let shape = heat.shape()[1..].to_vec();
        for i in 0..chunk.len() {
            out.push(Tensor::new(&shape, heat.data()[i * per..(i + 1) * per].to_vec())?);
        }
    }
    Ok(out)
}

/// Keypoints in source-image coordinates with per-keypoint confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_id: u64,
    pub keypoints: KeypointSet,
    pub confidence: Vec<f64>,
    /// Mean peak value, used as the instance score.
    pub score: f64,
}

impl Prediction {
    pub fn to_result(&self) -> CocoResult {
        CocoResult {
            image_id: self.image_id,
            category_id: 1,
            keypoints: self
                .keypoints
                .points
                .iter()
                .zip(&self.confidence)
                .flat_map(|(p, &c)| [p.x, p.y, c])
                .collect(),
            score: self.score,
        }
    }

    pub fn to_detection(&self) -> DetectionRecord {
        DetectionRecord {
            image_id: self.image_id,
            keypoints: self.keypoints.clone(),
            score: self.score,
        }
    }
}

/// Map decoded crop keypoints of `sample` back to its source image.
pub fn to_prediction(image_id: u64, sample: &InstanceSample, decoded: &[DecodedKeypoint], schema: &KeypointSchema) -> Prediction {
    let src = sample.to_source(&to_keypoint_set(decoded), schema);
    let mut confidence: Vec<f64> = decoded.iter().map(|d| d.confidence).collect();
    if sample.flipped {
        let perm = schema.flip_permutation();
        confidence = perm.iter().map(|&j| confidence[j]).collect();
    }
    let score = confidence.iter().sum::<f64>() / confidence.len().max(1) as f64;
    Prediction {
        image_id,
        keypoints: src,
        confidence,
        score,
    }
}

pub fn predict_instances<T: Scalar>(model: &Model<T>, instances: &[Instance], schema: &KeypointSchema) -> Result<Vec<Prediction>> {
    let samples: Vec<&InstanceSample> = instances.iter().map(|i| &i.sample).collect();
    let heat = predict_samples(model, &samples)?;
    Ok(instances
        .iter()
        .zip(heat)
        .map(|(inst, h)| to_prediction(inst.image_id, &inst.sample, &decode(&h), schema))
        .collect())
}

/// Predict every instance and score against the set's annotations.
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    set: &EvalSet,
    schema: &KeypointSchema,
) -> Result<(EvalSummary, Vec<Prediction>)> {
    let preds = predict_instances(model, &set.instances, schema)?;
    let dets: Vec<DetectionRecord> = preds.iter().map(Prediction::to_detection).collect();
    let summary = evaluate(&dets, &set.annotations, schema, &EvalParams::default())?;
    Ok((summary, preds))
}

/// Mean distance in heatmap cells between decoded and labeled keypoints,
/// measured in crop space over keypoints inside the crop.
pub fn mean_decode_error<T: Scalar>(model: &Model<T>, samples: &[&InstanceSample]) -> Result<f64> {
    let heat = predict_samples(model, samples)?;
    let (mut total, mut count) = (0.0, 0usize);
    for (s, h) in samples.iter().zip(heat) {
        let (ch, cw) = s.size();
        for (d, p) in decode(&h).iter().zip(&s.keypoints.points) {
            if p.is_labeled() && p.x >= 0.0 && p.y >= 0.0 && p.x < cw as f64 && p.y < ch as f64 {
                total += (d.x - p.x).hypot(d.y - p.y) / OUTPUT_STRIDE as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(CoreError::Config("no labeled keypoints to measure".into()));
    }
    Ok(total / count as f64)
}

/// Result of running the network on one image.
#[derive(Debug, Clone)]
pub struct ImageInference<T: Scalar> {
    pub prediction: Prediction,
    /// `[K, H/4, W/4]` in crop space.
    pub heatmaps: Tensor<T>,
    pub sample: InstanceSample,
}

/// Predict keypoints in one image within `bbox` (the whole image when absent).
/// Input that does not match the network size is cropped and resized.
pub fn infer_image<T: Scalar>(
    model: &Model<T>,
    img: &RgbImage,
    bbox: Option<[f64; 4]>,
    padding: f64,
    schema: &KeypointSchema,
) -> Result<ImageInference<T>> {
    let [h, w] = model.config().input_size;
    let bbox = match bbox {
        Some(b) => expand_bbox(b, padding),
        None => {
            if (img.width, img.height) != (w, h) {
                log::warn!(
                    "image is {}x{}, network expects {w}x{h}; cropping and resizing",
                    img.width,
                    img.height
                );
            }
            [0.0, 0.0, img.width as f64, img.height as f64]
        }
    };
    let empty = KeypointSet::new(vec![aggpose_data::Keypoint::new(0.0, 0.0, 0); schema.num_keypoints()]);
    let sample = crop_instance(img, bbox, &empty, (h, w), &Normalization::default())?;
    let heatmaps = predict_samples(model, &[&sample])?.remove(0);
    let prediction = to_prediction(0, &sample, &decode(&heatmaps), schema);
    Ok(ImageInference {
        prediction,
        heatmaps,
        sample,
    })
}
