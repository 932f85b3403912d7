use std::path::Path;

use aggpose_tensor::Tensor;

use crate::error::{DataError, Result};
use crate::io::write_atomic;

/// RGB image, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `[3, height, width]` row-major.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| DataError::Image {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = RgbImage::new(w, h);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
            }
        }
        Ok(out)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    bytes.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        bytes
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut buf);
        image::ImageEncoder::write_image(
            encoder,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| DataError::Image {
            path: "<memory>".into(),
            reason: e.to_string(),
        })?;
        Ok(buf)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.encode_png()?)
    }
}

/// Per-channel normalization `(v - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    /// ImageNet statistics.
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn apply(&self, c: usize, v: f32) -> f32 {
        (v - self.mean[c]) / self.std[c]
    }

    pub fn invert(&self, c: usize, v: f32) -> f32 {
        v * self.std[c] + self.mean[c]
    }

    /// Normalized `[3, H, W]` tensor of a whole image.
    pub fn to_tensor(&self, img: &RgbImage) -> Tensor<f32> {
        let plane = img.width * img.height;
        let data = img
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| self.apply(i / plane, v))
            .collect();
        Tensor::new(&[3, img.height, img.width], data).expect("shape matches data")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let mut img = RgbImage::new(5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f32 / 255.0;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = RgbImage::load(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn normalization_inverts() {
        let n = Normalization::default();
        for c in 0..3 {
            assert!((n.invert(c, n.apply(c, 0.3)) - 0.3).abs() < 1e-6);
            assert_eq!(n.apply(c, n.mean[c]), 0.0);
        }
    }
}
