//! Keypoint schemas, COCO-format IO, instance cropping, OKS-based evaluation
//! and synthetic stick-figure datasets.

pub mod coco;
pub mod crop;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod schema;
pub mod synth;

pub use coco::{AnnotationRecord, CocoDataset, DetectionRecord};
pub use crop::{augment, crop_instance, AugmentConfig, InstanceSample};
pub use error::{DataError, Result};
pub use geometry::Affine2;
pub use image::{Normalization, RgbImage};
pub use metrics::{evaluate, oks, EvalParams, EvalSummary, MetricsError};
pub use schema::{Keypoint, KeypointSchema, KeypointSet};
pub use synth::generate_synthetic;
