use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};
use rayon::prelude::*;

use super::{AnnotatedSample, Provenance, RgbImage};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, ProbabilityMask};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image files in `dir` keyed by stem.
fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.to_owned(), path.clone()) {
            return Err(Error::Dataset(format!("two files share the stem `{stem}`: {} and {}", prev.display(), path.display())));
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<DynamicImage> {
    let decode = || -> std::result::Result<DynamicImage, image::ImageError> {
        ImageReader::open(path)?.with_guessed_format()?.decode()
    };
    decode().map_err(|source| Error::Decode {
        path: path.to_owned(),
        source,
    })
}

fn to_rgb(img: &DynamicImage) -> RgbImage {
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    RgbImage { height: h, width: w, data }
}

fn to_mask(img: &DynamicImage) -> BinaryMask {
    let luma = img.to_luma8();
    BinaryMask {
        height: luma.height() as usize,
        width: luma.width() as usize,
        data: luma.as_raw().iter().map(|&v| u8::from(v > 127)).collect(),
    }
}

/// Reads `root/images/*` and the optional `root/masks/*`, paired by file
/// stem and sorted by id. Masks are binarized at > 127.
pub fn load_dataset(root: &Path) -> Result<Vec<AnnotatedSample>> {
    let images = list_by_stem(&root.join("images"))?;
    if images.is_empty() {
        return Err(Error::Dataset(format!("no images under {}", root.join("images").display())));
    }
    let mask_dir = root.join("masks");
    let masks = if mask_dir.is_dir() { list_by_stem(&mask_dir)? } else { BTreeMap::new() };
    if let Some(orphan) = masks.keys().find(|k| !images.contains_key(*k)) {
        return Err(Error::Dataset(format!("mask `{orphan}` has no matching image")));
    }
    let entries: Vec<_> = images.into_iter().collect();
    entries
        .par_iter()
        .map(|(id, path)| {
            let image = to_rgb(&open(path)?);
            let mask = masks.get(id).map(|p| open(p).map(|m| to_mask(&m))).transpose()?;
            AnnotatedSample::new(id.clone(), image, mask, Provenance::Original)
        })
        .collect()
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_rgb_png(image: &RgbImage) -> Result<Vec<u8>> {
    let n = image.height * image.width;
    let mut raw = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            raw.push(quantize(image.data[c * n + i]));
        }
    }
    encode(&raw, image.width, image.height, ExtendedColorType::Rgb8)
}

pub fn encode_gray_png(raw: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    encode(raw, width, height, ExtendedColorType::L8)
}

/// 8-bit grayscale PNG with values 0 and 255.
pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let raw: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
    encode_gray_png(&raw, mask.width, mask.height)
}

/// 8-bit grayscale PNG of `p·255` rounded.
pub fn encode_probability_png(mask: &ProbabilityMask) -> Result<Vec<u8>> {
    let raw: Vec<u8> = mask.data.iter().map(|&p| quantize(p)).collect();
    encode_gray_png(&raw, mask.width, mask.height)
}

fn encode(raw: &[u8], width: usize, height: usize, color: ExtendedColorType) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf).write_image(raw, width as u32, height as u32, color)?;
    Ok(buf)
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    Ok(to_rgb(&image::load_from_memory(bytes)?))
}

/// Strict decoder for submitted masks: an 8-bit grayscale PNG whose
/// pixels are all 0 or 255.
pub fn decode_binary_mask_png(bytes: &[u8]) -> Result<BinaryMask> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    let DynamicImage::ImageLuma8(luma) = img else {
        return Err(Error::Dataset(format!("mask must be 8-bit grayscale, got {:?}", img.color())));
    };
    let mut data = Vec::with_capacity(luma.as_raw().len());
    for &v in luma.as_raw() {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            other => return Err(Error::Dataset(format!("mask pixel value {other} is neither 0 nor 255"))),
        }
    }
    BinaryMask::new(luma.height() as usize, luma.width() as usize, data)
}

/// Writes `root/images/{id}.png` and, where present, `root/masks/{id}.png`.
pub fn save_dataset(samples: &[AnnotatedSample], root: &Path) -> Result<()> {
    let (images, masks) = (root.join("images"), root.join("masks"));
    std::fs::create_dir_all(&images)?;
    if samples.iter().any(|s| s.mask.is_some()) {
        std::fs::create_dir_all(&masks)?;
    }
    samples.par_iter().try_for_each(|s| -> Result<()> {
        std::fs::write(images.join(format!("{}.png", s.id)), encode_rgb_png(&s.image)?)?;
        if let Some(m) = &s.mask {
            std::fs::write(masks.join(format!("{}.png", s.id)), encode_mask_png(m)?)?;
        }
        Ok(())
    })
}
