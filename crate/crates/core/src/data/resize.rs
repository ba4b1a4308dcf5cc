use super::{AnnotatedSample, RgbImage};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Source coordinate and blend weight for each output index, sampling at
/// pixel centres with edge clamping.
fn taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (x - lo as f64) as f32)
        })
        .collect()
}

fn nearest(src: usize, dst: usize) -> Vec<usize> {
    let scale = src as f64 / dst as f64;
    (0..dst).map(|o| (((o as f64 + 0.5) * scale) as usize).min(src - 1)).collect()
}

/// Resizes to `side × side`: bilinear for the image, nearest-neighbour for
/// the mask so it stays binary.
pub fn resize_bilinear(sample: &AnnotatedSample, side: usize) -> Result<AnnotatedSample> {
    if side < 8 {
        return Err(Error::config(format!("resize side must be at least 8, got {side}")));
    }
    let img = &sample.image;
    let (ys, xs) = (taps(img.height, side), taps(img.width, side));
    let mut data = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        let plane = img.plane(c);
        let at = |y: usize, x: usize| plane[y * img.width + x];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    let mask = sample.mask.as_ref().map(|m| {
        let (ny, nx) = (nearest(m.height, side), nearest(m.width, side));
        let data = ny.iter().flat_map(|&y| nx.iter().map(move |&x| m.data[y * m.width + x])).collect();
        BinaryMask {
            height: side,
            width: side,
            data,
        }
    });
    AnnotatedSample::new(sample.id.clone(), RgbImage::new(side, side, data)?, mask, sample.provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;

    fn sample(image: RgbImage, mask: Option<BinaryMask>) -> AnnotatedSample {
        AnnotatedSample::new("s", image, mask, Provenance::Original).unwrap()
    }

    #[test]
    fn same_size_is_identity() {
        let img = RgbImage::new(16, 16, (0..768).map(|i| (i % 97) as f32 / 96.0).collect()).unwrap();
        let mask = BinaryMask::new(16, 16, (0..256).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        let out = resize_bilinear(&sample(img.clone(), Some(mask.clone())), 16).unwrap();
        let diff = out.image.data.iter().zip(&img.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-6);
        assert_eq!(out.mask.unwrap(), mask);
    }

    #[test]
    fn constant_image_stays_constant() {
        let out = resize_bilinear(&sample(RgbImage::filled(32, 32, 0.37), None), 16).unwrap();
        assert!(out.image.data.iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    fn checkerboard(side: usize) -> RgbImage {
        let n = side * side;
        let mut data = vec![0.0; 3 * n];
        for y in 0..side {
            for x in 0..side {
                data[y * side + x] = ((x + y) % 2) as f32;
            }
        }
        RgbImage::new(side, side, data).unwrap()
    }

    #[test]
    fn checkerboard_downsamples_to_block_averages() {
        assert_eq!(taps(4, 2), [(0, 1, 0.5), (2, 3, 0.5)]);
        let out = resize_bilinear(&sample(checkerboard(16), None), 8).unwrap();
        assert!(out.image.plane(0).iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn checkerboard_upsamples_to_hand_computed_weights() {
        // Output pixel o samples source coordinate o/2 - 1/4.
        let out = resize_bilinear(&sample(checkerboard(4), None), 8).unwrap();
        let p = out.image.plane(0);
        assert_eq!(p[0], 0.0);
        assert!((p[8 + 1] - 0.375).abs() < 1e-6);
        assert!((p[8 + 2] - 0.625).abs() < 1e-6);
        assert_eq!(p[63], 0.0);
    }

    #[test]
    fn upsampling_keeps_masks_binary() {
        let mask = BinaryMask::new(8, 8, (0..64).map(|i| (i % 5 == 0) as u8).collect()).unwrap();
        let out = resize_bilinear(&sample(RgbImage::filled(8, 8, 0.2), Some(mask.clone())), 24).unwrap();
        let m = out.mask.unwrap();
        assert_eq!((m.height, m.width), (24, 24));
        for y in 0..24 {
            for x in 0..24 {
                assert_eq!(m.get(y, x), mask.get(y / 3, x / 3));
            }
        }
    }

    #[test]
    fn rejects_tiny_sides() {
        assert!(resize_bilinear(&sample(RgbImage::filled(8, 8, 0.0), None), 4).is_err());
    }
}
