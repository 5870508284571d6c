//! Random training-time augmentation: horizontal flip, rotation, brightness.

use crate::error::{FerError, Result};
use crate::imgproc::{flip_horizontal as flip, GrayImage};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Rotation angle is drawn uniformly from `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
    pub brightness_min: f64,
    pub brightness_max: f64,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 15.0,
            brightness_min: 0.6,
            brightness_max: 1.4,
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A configuration under which [`augment`] is the identity.
    pub fn identity() -> Self {
        AugmentConfig {
            max_rotation_deg: 0.0,
            brightness_min: 1.0,
            brightness_max: 1.0,
            flip_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=45.0).contains(&self.max_rotation_deg) {
            return Err(FerError::config(format!(
                "rotation range must be within [0, 45] degrees, got {}",
                self.max_rotation_deg
            )));
        }
        if !(self.brightness_min > 0.0 && self.brightness_min <= self.brightness_max)
            || !self.brightness_max.is_finite()
        {
            return Err(FerError::config(format!(
                "brightness factors must satisfy 0 < min <= max, got [{}, {}]",
                self.brightness_min, self.brightness_max
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(FerError::config(format!(
                "flip probability must be in [0, 1], got {}",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

pub fn flip_horizontal(img: &GrayImage) -> GrayImage {
    flip(img)
}

/// Counter-clockwise rotation about the image center with bilinear sampling.
/// Samples falling outside the source read as 0.
pub fn rotate(img: &GrayImage, degrees: f64) -> GrayImage {
    if degrees == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            img.get(x as usize, y as usize) as f64
        }
    };
    GrayImage::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let sx = cx + dx * cos - dy * sin;
        let sy = cy + dx * sin + dy * cos;
        let (x0, y0) = (sx.floor(), sy.floor());
        let (ax, ay) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = at(x0, y0) * (1.0 - ax) + at(x0 + 1, y0) * ax;
        let bottom = at(x0, y0 + 1) * (1.0 - ax) + at(x0 + 1, y0 + 1) * ax;
        (top * (1.0 - ay) + bottom * ay).round().clamp(0.0, 255.0) as u8
    })
}

/// `pixel ← clamp(round(pixel · factor), 0, 255)`.
pub fn adjust_brightness(img: &GrayImage, factor: f64) -> GrayImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        *p = (*p as f64 * factor).round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Flip (with `flip_prob`), then rotate, then scale brightness, all drawn from `rng`.
pub fn augment(img: &GrayImage, cfg: &AugmentConfig, rng: &mut RngState) -> GrayImage {
    let do_flip = rng.bernoulli(cfg.flip_prob);
    let angle = rng.uniform_range(-cfg.max_rotation_deg, cfg.max_rotation_deg);
    let factor = rng.uniform_range(cfg.brightness_min, cfg.brightness_max);
    let mut out = if do_flip { flip(img) } else { img.clone() };
    out = rotate(&out, angle);
    if factor != 1.0 {
        out = adjust_brightness(&out, factor);
    }
    out
}

/// Augmentation of sample `index` under `cfg.seed`; independent of call order.
pub fn augment_indexed(img: &GrayImage, cfg: &AugmentConfig, index: u64) -> GrayImage {
    augment(img, cfg, &mut RngState::derived(cfg.seed, index))
}
