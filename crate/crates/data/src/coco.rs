//! COCO-format keypoint annotation and detection-result files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};
use crate::io::write_atomic;
use crate::schema::{KeypointSchema, KeypointSet};

/// Fraction of the box area used as object area when no segmentation exists.
pub const BBOX_AREA_FACTOR: f64 = 0.53;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub keypoints: Vec<f64>,
    pub num_keypoints: usize,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default)]
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub supercategory: Option<String>,
    #[serde(default)]
    pub keypoints: Vec<String>,
    #[serde(default)]
    pub skeleton: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One entry of a COCO keypoint results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    #[serde(default = "default_category")]
    pub category_id: u64,
    pub keypoints: Vec<f64>,
    pub score: f64,
}

/// One entry of a COCO box results file (person detector output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoBox {
    pub image_id: u64,
    #[serde(default = "default_category")]
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

fn default_category() -> u64 {
    1
}

/// A validated ground-truth instance.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub keypoints: KeypointSet,
    /// Object area in px², the square of the scale `s` of the similarity measure.
    pub area: f64,
    pub bbox: [f64; 4],
    pub iscrowd: bool,
    pub segmentation: Option<serde_json::Value>,
}

impl AnnotationRecord {
    pub fn scale(&self) -> f64 {
        self.area.sqrt()
    }
}

/// A predicted instance; all keypoints are treated as present.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub keypoints: KeypointSet,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDataset {
    pub fn image_index(&self) -> BTreeMap<u64, &CocoImage> {
        self.images.iter().map(|im| (im.id, im)).collect()
    }

    pub fn to_file(&self) -> CocoFile {
        CocoFile {
            images: self.images.clone(),
            annotations: self
                .annotations
                .iter()
                .map(|a| CocoAnnotation {
                    id: a.id,
                    image_id: a.image_id,
                    category_id: a.category_id,
                    keypoints: a.keypoints.to_flat(),
                    num_keypoints: a.keypoints.num_labeled(),
                    bbox: a.bbox,
                    area: Some(a.area),
                    iscrowd: a.iscrowd as u8,
                    segmentation: a.segmentation.clone(),
                })
                .collect(),
            categories: self.categories.clone(),
        }
    }
}

fn has_segmentation(seg: &Option<serde_json::Value>) -> bool {
    match seg {
        None | Some(serde_json::Value::Null) => false,
        Some(serde_json::Value::Array(a)) => !a.is_empty(),
        Some(serde_json::Value::Object(o)) => !o.is_empty(),
        Some(_) => true,
    }
}

/// Validate a parsed annotation file against `schema`.
///
/// Coordinates of labeled keypoints outside the image are clipped with a warning.
pub fn validate(file: CocoFile, schema: &KeypointSchema) -> Result<CocoDataset> {
    let k = schema.num_keypoints();
    for cat in &file.categories {
        if !cat.keypoints.is_empty() && cat.keypoints.len() != k {
            return Err(DataError::SchemaMismatch {
                expected: k,
                found: cat.keypoints.len(),
                context: format!("category {} ({})", cat.id, cat.name),
            });
        }
    }
    let images: BTreeMap<u64, &CocoImage> = file.images.iter().map(|im| (im.id, im)).collect();
    let mut annotations = Vec::with_capacity(file.annotations.len());
    for ann in &file.annotations {
        let invalid = |reason: String| DataError::InvalidRecord { id: ann.id, reason };
        if ann.keypoints.len() != 3 * k {
            return Err(DataError::SchemaMismatch {
                expected: k,
                found: ann.keypoints.len() / 3,
                context: format!("annotation {}", ann.id),
            });
        }
        let image = images
            .get(&ann.image_id)
            .ok_or_else(|| invalid(format!("unknown image id {}", ann.image_id)))?;
        let mut kps = KeypointSet::from_flat(&ann.keypoints).map_err(invalid)?;
        let (w, h) = (image.width as f64, image.height as f64);
        for (i, p) in kps.points.iter_mut().enumerate() {
            if p.is_labeled() && (p.x < 0.0 || p.y < 0.0 || p.x > w || p.y > h) {
                log::warn!(
                    "annotation {}: keypoint {i} at ({}, {}) outside {w}x{h}, clipped",
                    ann.id,
                    p.x,
                    p.y
                );
                p.x = p.x.clamp(0.0, w);
                p.y = p.y.clamp(0.0, h);
            }
        }
        let [_, _, bw, bh] = ann.bbox;
        if !(bw >= 0.0 && bh >= 0.0) {
            return Err(invalid(format!("bbox {:?} has negative size", ann.bbox)));
        }
        let area = match ann.area {
            Some(a) if has_segmentation(&ann.segmentation) => a,
            _ => bw * bh * BBOX_AREA_FACTOR,
        };
        if kps.num_labeled() > 0 && !(area > 0.0) {
            return Err(invalid("labeled keypoints but zero object area".into()));
        }
        annotations.push(AnnotationRecord {
            id: ann.id,
            image_id: ann.image_id,
            category_id: ann.category_id,
            keypoints: kps,
            area,
            bbox: ann.bbox,
            iscrowd: ann.iscrowd != 0,
            segmentation: ann.segmentation.clone(),
        });
    }
    Ok(CocoDataset {
        images: file.images,
        annotations,
        categories: file.categories,
    })
}

/// Read and validate a COCO keypoint annotation file. The file is never modified.
pub fn load_coco_keypoints(path: impl AsRef<Path>, schema: &KeypointSchema) -> Result<CocoDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let file: CocoFile = serde_json::from_str(&text).map_err(|e| DataError::json(path, e))?;
    validate(file, schema)
}

pub fn save_coco(path: impl AsRef<Path>, dataset: &CocoDataset) -> Result<()> {
    let text = serde_json::to_string_pretty(&dataset.to_file()).expect("COCO file serializes");
    write_atomic(path, text.as_bytes())
}

pub fn load_results(path: impl AsRef<Path>, schema: &KeypointSchema) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let raw: Vec<CocoResult> = serde_json::from_str(&text).map_err(|e| DataError::json(path, e))?;
    let k = schema.num_keypoints();
    raw.into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.keypoints.len() != 3 * k {
                return Err(DataError::SchemaMismatch {
                    expected: k,
                    found: r.keypoints.len() / 3,
                    context: format!("result {i} of image {}", r.image_id),
                });
            }
            if !r.score.is_finite() {
                return Err(DataError::InvalidRecord {
                    id: i as u64,
                    reason: "non-finite score".into(),
                });
            }
            // results carry confidences in the third slot; every keypoint counts as present
            let points = r
                .keypoints
                .chunks(3)
                .map(|c| crate::schema::Keypoint::new(c[0], c[1], crate::schema::LABELED_VISIBLE))
                .collect();
            Ok(DetectionRecord {
                image_id: r.image_id,
                keypoints: KeypointSet::new(points),
                score: r.score,
            })
        })
        .collect()
}

pub fn save_results(path: impl AsRef<Path>, results: &[CocoResult]) -> Result<()> {
    let text = serde_json::to_string_pretty(results).expect("results serialize");
    write_atomic(path, text.as_bytes())
}

pub fn load_boxes(path: impl AsRef<Path>) -> Result<Vec<CocoBox>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::json(path, e))
}

/// Category entry describing `schema`.
pub fn category_for(schema: &KeypointSchema) -> CocoCategory {
    CocoCategory {
        id: 1,
        name: "person".into(),
        supercategory: Some("person".into()),
        keypoints: schema.keypoint_names.clone(),
        skeleton: schema.skeleton.iter().map(|&(a, b)| [a + 1, b + 1]).collect(),
    }
}
