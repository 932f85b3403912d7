#![allow(dead_code)]

use aggpose_data::crop::{expand_bbox, TOY_INPUT_SIZE};
use aggpose_data::synth::synthesize;
use aggpose_data::{crop_instance, InstanceSample, KeypointSchema, Normalization};

/// Cropped synthetic instances at the toy input size.
pub fn toy_instances(n: usize, seed: u64, padding: f64) -> (Vec<InstanceSample>, KeypointSchema) {
    let schema = KeypointSchema::infant21(0.08);
    let scenes = synthesize(n, seed, (48, 64), &schema).unwrap();
    let norm = Normalization::default();
    let samples = scenes
        .iter()
        .map(|s| crop_instance(&s.image, expand_bbox(s.bbox, padding), &s.keypoints, TOY_INPUT_SIZE, &norm).unwrap())
        .collect();
    (samples, schema)
}
