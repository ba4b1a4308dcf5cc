//! Seeded synthetic pavement tiles: a noisy gray background crossed by one
//! to three dark random-walk polylines, with the exact rasterized mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AnnotatedSample, Provenance, RgbImage};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub const SYNTHETIC_SIDES: [usize; 4] = [32, 64, 128, 256];

const BACKGROUND: f32 = 0.55;
const BACKGROUND_SIGMA: f32 = 0.05;
const CRACK: f32 = 0.15;
const CRACK_SIGMA: f32 = 0.03;

/// One crack centreline in pixel coordinates (pixel `(x, y)` has its centre
/// at `(x + 0.5, y + 0.5)`), drawn with the given stroke width.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    pub points: Vec<(f32, f32)>,
    pub width: f32,
}

impl Polyline {
    /// Distance from `p` to the nearest segment.
    pub fn distance(&self, p: (f32, f32)) -> f32 {
        self.points
            .windows(2)
            .map(|s| segment_distance(p, s[0], s[1]))
            .fold(f32::INFINITY, f32::min)
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Pixels whose centre lies within half the stroke width of a polyline.
pub fn rasterize(polylines: &[Polyline], side: usize) -> BinaryMask {
    let mut mask = BinaryMask::empty(side, side);
    for line in polylines {
        let r = line.width / 2.0;
        for seg in line.points.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let x0 = ((a.0.min(b.0) - r).floor().max(0.0)) as usize;
            let x1 = ((a.0.max(b.0) + r).ceil() as usize).min(side);
            let y0 = ((a.1.min(b.1) - r).floor().max(0.0)) as usize;
            let y1 = ((a.1.max(b.1) + r).ceil() as usize).min(side);
            for y in y0..y1 {
                for x in x0..x1 {
                    if segment_distance((x as f32 + 0.5, y as f32 + 0.5), a, b) <= r {
                        mask.data[y * side + x] = 1;
                    }
                }
            }
        }
    }
    mask
}

fn random_walk(rng: &mut ChaCha8Rng, side: usize) -> Polyline {
    let s = side as f32;
    let step = s / 12.0;
    let turn = Normal::new(0.0f32, 0.35).expect("valid sigma");
    let mut p = (rng.random_range(s * 0.125..s * 0.875), rng.random_range(s * 0.125..s * 0.875));
    let mut heading = rng.random_range(0.0..std::f32::consts::TAU);
    let segments = rng.random_range(6..=12);
    let mut points = vec![p];
    for _ in 0..segments {
        heading += turn.sample(rng);
        let mut next = (p.0 + step * heading.cos(), p.1 + step * heading.sin());
        // Reflect off the borders so the crack stays in frame.
        if !(1.0..=s - 1.0).contains(&next.0) {
            heading = std::f32::consts::PI - heading;
            next.0 = next.0.clamp(1.0, s - 1.0);
        }
        if !(1.0..=s - 1.0).contains(&next.1) {
            heading = -heading;
            next.1 = next.1.clamp(1.0, s - 1.0);
        }
        points.push(next);
        p = next;
    }
    Polyline {
        points,
        width: rng.random_range(1..=3) as f32,
    }
}

fn one(seed: u64, index: u64, side: usize) -> (AnnotatedSample, Vec<Polyline>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let cracks: Vec<_> = (0..rng.random_range(1..=3)).map(|_| random_walk(&mut rng, side)).collect();
    let mask = rasterize(&cracks, side);
    let bg = Normal::new(BACKGROUND, BACKGROUND_SIGMA).expect("valid sigma");
    let dark = Normal::new(CRACK, CRACK_SIGMA).expect("valid sigma");
    let n = side * side;
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        let v = if mask.data[i] == 1 { dark.sample(&mut rng) } else { bg.sample(&mut rng) };
        let v = v.clamp(0.0, 1.0);
        for c in 0..3 {
            data[c * n + i] = v;
        }
    }
    let image = RgbImage { height: side, width: side, data };
    let sample = AnnotatedSample {
        id: format!("syn_{index:05}"),
        image,
        mask: Some(mask),
        provenance: Provenance::Synthetic,
    };
    (sample, cracks)
}

fn check(n: usize, side: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::config("synthetic set needs at least one sample"));
    }
    if !SYNTHETIC_SIDES.contains(&side) {
        return Err(Error::config(format!("synthetic side must be one of {SYNTHETIC_SIDES:?}, got {side}")));
    }
    Ok(())
}

/// `n` samples of `side × side`; sample `i` depends only on `(seed, i, side)`.
pub fn generate_synthetic(n: usize, side: usize, seed: u64) -> Result<Vec<AnnotatedSample>> {
    Ok(generate_synthetic_traced(n, side, seed)?.into_iter().map(|(s, _)| s).collect())
}

/// As [`generate_synthetic`], also returning each sample's crack centrelines.
pub fn generate_synthetic_traced(n: usize, side: usize, seed: u64) -> Result<Vec<(AnnotatedSample, Vec<Polyline>)>> {
    check(n, side)?;
    Ok((0..n as u64).map(|i| one(seed, i, side)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(4, 64, 9).unwrap();
        assert_eq!(a, generate_synthetic(4, 64, 9).unwrap());
        assert_ne!(a, generate_synthetic(4, 64, 10).unwrap());
        assert_eq!(a[2], generate_synthetic(3, 64, 9).unwrap()[2]);
    }

    #[test]
    fn ids_are_sorted_and_unique() {
        let s = generate_synthetic(12, 32, 0).unwrap();
        assert!(s.windows(2).all(|w| w[0].id < w[1].id));
    }

    #[test]
    fn mask_is_exactly_the_stroke_set() {
        for (sample, lines) in generate_synthetic_traced(10, 64, 3).unwrap() {
            let m = sample.mask.unwrap();
            for y in 0..64 {
                for x in 0..64 {
                    let c = (x as f32 + 0.5, y as f32 + 0.5);
                    let on = lines.iter().any(|l| l.distance(c) <= l.width / 2.0);
                    assert_eq!(m.get(y, x), on, "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn foreground_fraction_bounds_at_side_64() {
        for seed in 0..100 {
            for s in generate_synthetic(3, 64, seed).unwrap() {
                let f = s.mask.unwrap().count() as f64 / 4096.0;
                assert!(f > 0.002 && f < 0.15, "seed {seed} {}: fraction {f}", s.id);
            }
        }
    }

    #[test]
    fn cracks_are_darker_than_background() {
        let s = &generate_synthetic(1, 64, 1).unwrap()[0];
        let m = s.mask.as_ref().unwrap();
        let (mut on, mut off, mut n_on) = (0.0, 0.0, 0);
        for (i, &v) in s.image.plane(0).iter().enumerate() {
            if m.data[i] == 1 {
                on += v;
                n_on += 1;
            } else {
                off += v;
            }
        }
        let on = on / n_on as f32;
        let off = off / (4096 - n_on) as f32;
        assert!((on - CRACK).abs() < 0.02 && (off - BACKGROUND).abs() < 0.01, "{on} {off}");
        assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_synthetic(0, 64, 0).is_err());
        assert!(generate_synthetic(1, 48, 0).is_err());
    }
}
