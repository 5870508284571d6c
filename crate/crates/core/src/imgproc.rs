//! Grayscale frame operations: denoising, resizing, normalization.

use crate::error::{FerError, Result};
use crate::model::INPUT_SIZE;
use crate::tensor::Tensor;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(FerError::input(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(FerError::input(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    /// Panics if either dimension is zero.
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self::from_fn(width, height, |_, _| value)
    }

    /// Panics if either dimension is zero.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        GrayImage {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn same_size(&self, other: &GrayImage) -> bool {
        self.width == other.width && self.height == other.height
    }
}

pub fn flip_horizontal(img: &GrayImage) -> GrayImage {
    GrayImage::from_fn(img.width, img.height, |x, y| img.get(img.width - 1 - x, y))
}

pub fn flip_vertical(img: &GrayImage) -> GrayImage {
    GrayImage::from_fn(img.width, img.height, |x, y| img.get(x, img.height - 1 - y))
}

/// 3x3 binomial Gaussian `[[1,2,1],[2,4,2],[1,2,1]] / 16` with replicated
/// borders, rounded half up.
pub fn gaussian3x3(img: &GrayImage) -> GrayImage {
    const W: [[u32; 3]; 3] = [[1, 2, 1], [2, 4, 2], [1, 2, 1]];
    let (w, h) = (img.width as isize, img.height as isize);
    let at = |x: isize, y: isize| -> u32 {
        img.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize) as u32
    };
    GrayImage::from_fn(img.width, img.height, |x, y| {
        let (x, y) = (x as isize, y as isize);
        let mut sum = 0u32;
        for (dy, row) in W.iter().enumerate() {
            for (dx, &k) in row.iter().enumerate() {
                sum += k * at(x + dx as isize - 1, y + dy as isize - 1);
            }
        }
        ((sum + 8) / 16) as u8
    })
}

/// Bilinear resampling with corner-aligned coordinates.
pub fn resize_bilinear(img: &GrayImage, width: usize, height: usize) -> Result<GrayImage> {
    if img.width < 2 || img.height < 2 {
        return Err(FerError::input(format!(
            "cannot resample a {}x{} image; need at least 2x2",
            img.width, img.height
        )));
    }
    if width == 0 || height == 0 {
        return Err(FerError::input("target size must be positive"));
    }
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let scale = |src: usize, dst: usize| {
        if dst > 1 {
            (src - 1) as f64 / (dst - 1) as f64
        } else {
            0.0
        }
    };
    let (sx, sy) = (scale(img.width, width), scale(img.height, height));
    Ok(GrayImage::from_fn(width, height, |x, y| {
        let fx = x as f64 * sx;
        let fy = y as f64 * sy;
        let x0 = (fx.floor() as usize).min(img.width - 1);
        let y0 = (fy.floor() as usize).min(img.height - 1);
        let x1 = (x0 + 1).min(img.width - 1);
        let y1 = (y0 + 1).min(img.height - 1);
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let p = |xx: usize, yy: usize| img.get(xx, yy) as f64;
        let top = p(x0, y0) * (1.0 - ax) + p(x1, y0) * ax;
        let bottom = p(x0, y1) * (1.0 - ax) + p(x1, y1) * ax;
        (top * (1.0 - ay) + bottom * ay).round().clamp(0.0, 255.0) as u8
    }))
}

/// Scales a 48x48 image to `[0, 1]` as a `[1, 48, 48]` tensor.
pub fn normalize(img: &GrayImage) -> Result<Tensor<f32>> {
    if img.width != INPUT_SIZE || img.height != INPUT_SIZE {
        return Err(FerError::shape(format!(
            "model input must be {INPUT_SIZE}x{INPUT_SIZE}, got {}x{}",
            img.width, img.height
        )));
    }
    to_unit_tensor(img)
}

/// Scales any image to `[0, 1]` as a `[1, H, W]` tensor.
pub fn to_unit_tensor(img: &GrayImage) -> Result<Tensor<f32>> {
    Tensor::new(
        vec![1, img.height, img.width],
        img.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )
}
