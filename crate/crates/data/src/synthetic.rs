use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{DataError, GrayImage, Result, SegmentationMask};

/// Smallest accepted image side.
pub const MIN_SIZE: usize = 32;

// Control points stay this far from the border so curves never leave the
// frame, even after a 15 degree rotation plus shear.
const MARGIN_FRACTION: f32 = 0.16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    pub fn noise_sigma(self) -> f32 {
        match self {
            Difficulty::Easy => 0.05,
            Difficulty::Hard => 0.15,
        }
    }
}

impl std::str::FromStr for Difficulty {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(format!("unknown difficulty `{other}` (expected easy|hard)")),
        }
    }
}

/// Quadratic Bézier stroke; points are (x, y) in pixel units, pixel centers
/// at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Curve {
    pub control: [(f32, f32); 3],
    pub width: f32,
}

impl Curve {
    pub fn point(&self, t: f32) -> (f32, f32) {
        let [p0, p1, p2] = self.control;
        let u = 1.0 - t;
        (
            u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
            u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
        )
    }

    fn polyline(&self) -> Vec<(f32, f32)> {
        let [p0, p1, p2] = self.control;
        let hull = dist(p0, p1) + dist(p1, p2);
        let steps = (hull * 2.0).ceil().max(8.0) as usize;
        (0..=steps).map(|i| self.point(i as f32 / steps as f32)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub curves: Vec<Curve>,
    pub noise_sigma: f32,
    pub difficulty: Difficulty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: GrayImage,
    pub mask: SegmentationMask,
    pub seed: u64,
    pub meta: SampleMeta,
}

fn dist(a: (f32, f32), b: (f32, f32)) -> f32 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn point_segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, (a.0 + t * dx, a.1 + t * dy))
}

/// Sets every pixel whose center lies within `width / 2` of the curve.
pub fn rasterize_curve(curve: &Curve, mask: &mut SegmentationMask) {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let half = curve.width * 0.5;
    let line = curve.polyline();
    for seg in line.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let r0 = ((a.1.min(b.1) - half).floor() as isize).max(0);
        let r1 = ((a.1.max(b.1) + half).ceil() as isize).min(h - 1);
        let c0 = ((a.0.min(b.0) - half).floor() as isize).max(0);
        let c1 = ((a.0.max(b.0) + half).ceil() as isize).min(w - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                if point_segment_distance((c as f32, r as f32), a, b) <= half {
                    mask.set(r as usize, c as usize, true);
                }
            }
        }
    }
}

fn random_curve(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Curve {
    let span = |n: usize| {
        let m = (n as f32 * MARGIN_FRACTION).round();
        (m, n as f32 - 1.0 - m)
    };
    let (x_lo, x_hi) = span(w);
    let (y_lo, y_hi) = span(h);
    let min_len = h.min(w) as f32 / 4.0;
    let pick = |rng: &mut ChaCha8Rng| (rng.random_range(x_lo..=x_hi), rng.random_range(y_lo..=y_hi));
    let p0 = pick(rng);
    let p2 = loop {
        let p = pick(rng);
        if dist(p0, p) >= min_len {
            break p;
        }
    };
    let p1 = pick(rng);
    Curve {
        control: [p0, p1, p2],
        width: rng.random_range(1.0..=4.0),
    }
}

/// Generates one image/mask pair from `seed`.
///
/// The mask is the rasterized support of 1 to 3 random curves. The image is
/// a smooth background gradient, darkened on the mask, plus Gaussian noise
/// (and dark distractor blobs for [`Difficulty::Hard`]), clamped to [0, 1].
pub fn generate_sample(seed: u64, height: usize, width: usize, difficulty: Difficulty) -> Result<SyntheticSample> {
    if height < MIN_SIZE || width < MIN_SIZE {
        return Err(DataError::Contract(format!(
            "synthetic sample must be at least {MIN_SIZE}x{MIN_SIZE}, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_curves = rng.random_range(1..=3);
    let curves: Vec<Curve> = (0..n_curves).map(|_| random_curve(&mut rng, height, width)).collect();
    let mut mask = SegmentationMask::zeros(height, width);
    for c in &curves {
        rasterize_curve(c, &mut mask);
    }

    let base: f32 = rng.random_range(0.55..0.8);
    let gx: f32 = rng.random_range(-0.15..0.15);
    let gy: f32 = rng.random_range(-0.15..0.15);
    let depth: f32 = rng.random_range(0.25..0.45);
    let mut image = GrayImage::filled(height, width, 0.0);
    for r in 0..height {
        for c in 0..width {
            let bg = base + gx * (c as f32 / width as f32 - 0.5) + gy * (r as f32 / height as f32 - 0.5);
            image.set(r, c, if mask.get(r, c) { bg - depth } else { bg });
        }
    }

    if difficulty == Difficulty::Hard {
        let blobs = rng.random_range(2..=4);
        for _ in 0..blobs {
            let cx: f32 = rng.random_range(0.0..width as f32);
            let cy: f32 = rng.random_range(0.0..height as f32);
            let radius: f32 = rng.random_range(2.0..6.0);
            let amp: f32 = rng.random_range(0.1..0.3);
            for r in 0..height {
                for c in 0..width {
                    let d2 = (c as f32 - cx).powi(2) + (r as f32 - cy).powi(2);
                    let v = image.get(r, c) - amp * (-d2 / (2.0 * radius * radius)).exp();
                    image.set(r, c, v);
                }
            }
        }
    }

    let sigma = difficulty.noise_sigma();
    let noise = Normal::new(0.0f32, sigma).expect("valid sigma");
    for v in image.as_mut_slice() {
        *v += noise.sample(&mut rng);
    }
    image.clamp_unit();

    Ok(SyntheticSample {
        image,
        mask,
        seed,
        meta: SampleMeta {
            curves,
            noise_sigma: sigma,
            difficulty,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_images() {
        assert!(generate_sample(0, 16, 64, Difficulty::Easy).is_err());
    }

    #[test]
    fn same_seed_same_sample() {
        let a = generate_sample(42, 64, 64, Difficulty::Hard).unwrap();
        let b = generate_sample(42, 64, 64, Difficulty::Hard).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(43, 64, 64, Difficulty::Hard).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn horizontal_unit_stroke_is_one_pixel_row() {
        let curve = Curve {
            control: [(2.0, 3.0), (5.0, 3.0), (8.0, 3.0)],
            width: 1.0,
        };
        let mut mask = SegmentationMask::zeros(8, 12);
        rasterize_curve(&curve, &mut mask);
        let expected = SegmentationMask::from_fn(8, 12, |r, c| r == 3 && (2..=8).contains(&c));
        assert_eq!(mask, expected);
    }

    #[test]
    fn image_stays_in_unit_range() {
        for seed in 0..20 {
            let s = generate_sample(seed, 32, 48, Difficulty::Hard).unwrap();
            assert!(s.image.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!((s.mask.height(), s.mask.width()), (32, 48));
        }
    }
}
