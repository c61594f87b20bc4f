use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{GrayImage, SegmentationMask, SyntheticSample};

/// One concrete draw of the augmentation distribution.
///
/// The affine part (rotation then shear, about the image center) is applied
/// first with bilinear resampling; flips are applied afterwards and are exact.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentPlan {
    pub hflip: bool,
    pub vflip: bool,
    pub rotation_deg: Option<f32>,
    pub shear: Option<f32>,
}

impl AugmentPlan {
    pub const MAX_ROTATION_DEG: f32 = 15.0;
    pub const MAX_SHEAR: f32 = 0.1;

    /// Each transform is included independently with probability 1/2.
    pub fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let rotation_deg = rng
            .random_bool(0.5)
            .then(|| rng.random_range(-Self::MAX_ROTATION_DEG..=Self::MAX_ROTATION_DEG));
        let shear = rng
            .random_bool(0.5)
            .then(|| rng.random_range(-Self::MAX_SHEAR..=Self::MAX_SHEAR));
        AugmentPlan {
            hflip,
            vflip,
            rotation_deg,
            shear,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentPlan::default()
    }

    pub fn apply(&self, sample: &SyntheticSample) -> SyntheticSample {
        let (image, mask) = self.apply_pair(&sample.image, &sample.mask);
        SyntheticSample {
            image,
            mask,
            seed: sample.seed,
            meta: sample.meta.clone(),
        }
    }

    /// Applies the same transform to an image and its mask.
    pub fn apply_pair(&self, image: &GrayImage, mask: &SegmentationMask) -> (GrayImage, SegmentationMask) {
        let mut image = image.clone();
        let mut mask = mask.clone();
        if self.rotation_deg.is_some() || self.shear.is_some() {
            let theta = self.rotation_deg.unwrap_or(0.0).to_radians();
            let k = self.shear.unwrap_or(0.0);
            (image, mask) = warp(&image, &mask, theta, k);
        }
        if self.hflip {
            image = flip(&image, true);
            mask = flip_mask(&mask, true);
        }
        if self.vflip {
            image = flip(&image, false);
            mask = flip_mask(&mask, false);
        }
        (image, mask)
    }
}

pub fn augment(sample: &SyntheticSample, seed: u64) -> SyntheticSample {
    AugmentPlan::draw(seed).apply(sample)
}

fn flip(img: &GrayImage, horizontal: bool) -> GrayImage {
    let (h, w) = (img.height(), img.width());
    let mut out = GrayImage::filled(h, w, 0.0);
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = if horizontal { (r, w - 1 - c) } else { (h - 1 - r, c) };
            out.set(r, c, img.get(sr, sc));
        }
    }
    out
}

fn flip_mask(mask: &SegmentationMask, horizontal: bool) -> SegmentationMask {
    let (h, w) = (mask.height(), mask.width());
    SegmentationMask::from_fn(h, w, |r, c| {
        if horizontal {
            mask.get(r, w - 1 - c)
        } else {
            mask.get(h - 1 - r, c)
        }
    })
}

// Bilinear lookup; `outside` is used for the missing neighbours when the
// point falls off the grid, or `None` to clamp to the border.
fn bilinear(h: usize, w: usize, x: f32, y: f32, outside: Option<f32>, at: impl Fn(usize, usize) -> f32) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let fetch = |r: f32, c: f32| -> f32 {
        let inside = r >= 0.0 && c >= 0.0 && r <= (h - 1) as f32 && c <= (w - 1) as f32;
        match (inside, outside) {
            (true, _) => at(r as usize, c as usize),
            (false, Some(v)) => v,
            (false, None) => at(
                r.clamp(0.0, (h - 1) as f32) as usize,
                c.clamp(0.0, (w - 1) as f32) as usize,
            ),
        }
    };
    (1.0 - fy) * ((1.0 - fx) * fetch(y0, x0) + fx * fetch(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * fetch(y0 + 1.0, x0) + fx * fetch(y0 + 1.0, x0 + 1.0))
}

fn warp(img: &GrayImage, mask: &SegmentationMask, theta: f32, shear: f32) -> (GrayImage, SegmentationMask) {
    let (h, w) = (img.height(), img.width());
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let (s, c) = theta.sin_cos();
    let mut out = GrayImage::filled(h, w, 0.0);
    let mut out_mask = SegmentationMask::zeros(h, w);
    for r in 0..h {
        for col in 0..w {
            // Inverse of (rotate then shear): undo the shear, then the rotation.
            let (px, py) = (col as f32 - cx, r as f32 - cy);
            let (ux, uy) = (px - shear * py, py);
            let sx = c * ux + s * uy + cx;
            let sy = -s * ux + c * uy + cy;
            let v = bilinear(h, w, sx, sy, None, |rr, cc| img.get(rr, cc));
            out.set(r, col, v.clamp(0.0, 1.0));
            let m = bilinear(h, w, sx, sy, Some(0.0), |rr, cc| f32::from(u8::from(mask.get(rr, cc))));
            out_mask.set(r, col, m >= 0.5);
        }
    }
    (out, out_mask)
}
