//! Samples, on-disk datasets, resizing and the synthetic crack generator.

mod io;
mod resize;
mod synth;

pub use io::{
    decode_binary_mask_png, decode_image, encode_gray_png, encode_mask_png, encode_probability_png, encode_rgb_png,
    load_dataset, save_dataset,
};
pub use resize::resize_bilinear;
pub use synth::{generate_synthetic, generate_synthetic_traced, rasterize, Polyline, SYNTHETIC_SIDES};

use serde::{Deserialize, Serialize};

use crate::backend::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Planar RGB image, channel-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::contract("rgb image", format!("{} values for 3x{height}x{width}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Rectified,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    /// File stem; unique within a dataset.
    pub id: String,
    pub image: RgbImage,
    pub mask: Option<BinaryMask>,
    pub provenance: Provenance,
}

impl AnnotatedSample {
    pub fn new(id: impl Into<String>, image: RgbImage, mask: Option<BinaryMask>, provenance: Provenance) -> Result<Self> {
        let id = id.into();
        if let Some(m) = &mask {
            if (m.height, m.width) != (image.height, image.width) {
                return Err(Error::Dataset(format!(
                    "`{id}`: mask is {}x{} but image is {}x{}",
                    m.height, m.width, image.height, image.width
                )));
            }
        }
        Ok(Self {
            id,
            image,
            mask,
            provenance,
        })
    }

    pub fn require_mask(&self) -> Result<&BinaryMask> {
        self.mask.as_ref().ok_or_else(|| Error::MissingGroundTruth(self.id.clone()))
    }
}

fn common_extents<'a>(mut it: impl Iterator<Item = &'a AnnotatedSample>) -> Result<(usize, usize)> {
    let first = it.next().ok_or_else(|| Error::contract("batch", "empty batch"))?;
    let ext = (first.image.height, first.image.width);
    for s in it {
        if (s.image.height, s.image.width) != ext {
            return Err(Error::contract(
                "batch",
                format!("`{}` is {}x{}, batch is {}x{}", s.id, s.image.height, s.image.width, ext.0, ext.1),
            ));
        }
    }
    Ok(ext)
}

/// Stacks images into an `N×3×H×W` tensor.
pub fn image_batch(samples: &[&AnnotatedSample]) -> Result<Tensor> {
    let (h, w) = common_extents(samples.iter().copied())?;
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        data.extend_from_slice(&s.image.data);
    }
    Tensor::new(Shape::new(samples.len(), 3, h, w), data)
}

/// Stacks ground-truth masks into an `N×1×H×W` 0/1 tensor.
pub fn mask_batch(samples: &[&AnnotatedSample]) -> Result<Tensor> {
    let (h, w) = common_extents(samples.iter().copied())?;
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        data.extend(s.require_mask()?.to_f32());
    }
    Tensor::new(Shape::new(samples.len(), 1, h, w), data)
}
