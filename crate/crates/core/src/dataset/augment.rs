use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    RandomCrop { size: u32 },
    RandomRotation { max_degrees: f64 },
}

/// Training-time pipeline: square resize, then the listed ops in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub resize_to: u32,
    pub ops: Vec<AugmentOp>,
    pub rng_seed: u64,
}

impl AugmentationConfig {
    pub fn new(resize_to: u32, crop: u32, max_degrees: f64, rng_seed: u64) -> Self {
        AugmentationConfig {
            resize_to,
            ops: vec![
                AugmentOp::RandomCrop { size: crop },
                AugmentOp::RandomRotation { max_degrees },
            ],
            rng_seed,
        }
    }

    /// Problems with the configuration, all at once.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.resize_to == 0 {
            out.push("resize_to must be positive".to_string());
        }
        for op in &self.ops {
            match *op {
                AugmentOp::RandomCrop { size: 0 } => out.push("crop size must be positive".to_string()),
                AugmentOp::RandomCrop { size } if size > self.resize_to => {
                    out.push(format!("crop size {size} exceeds resize_to {}", self.resize_to))
                }
                AugmentOp::RandomRotation { max_degrees } if !(max_degrees.is_finite() && max_degrees >= 0.0) => {
                    out.push(format!("rotation bound {max_degrees} must be finite and >= 0"))
                }
                _ => {}
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.diagnostics().first() {
            Some(d) => Err(Error::InvalidParameter(d.clone())),
            None => Ok(()),
        }
    }

    /// Side length of the pipeline output.
    pub fn output_size(&self) -> u32 {
        self.ops
            .iter()
            .rev()
            .find_map(|op| match op {
                AugmentOp::RandomCrop { size } => Some(*size),
                _ => None,
            })
            .unwrap_or(self.resize_to)
    }
}

/// Resizes to `size`×`size` with a triangle filter; a no-op when the image
/// already has that shape.
pub fn resize_square(image: &RgbImage, size: u32) -> RgbImage {
    if image.dimensions() == (size, size) {
        image.clone()
    } else {
        imageops::resize(image, size, size, FilterType::Triangle)
    }
}

pub fn crop(image: &RgbImage, x0: u32, y0: u32, size: u32) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if x0 + size > w || y0 + size > h {
        return Err(Error::InvalidParameter(format!(
            "crop {size}px at ({x0},{y0}) exceeds {w}x{h} image"
        )));
    }
    Ok(imageops::crop_imm(image, x0, y0, size, size).to_image())
}

/// Rotates about the image centre by `degrees` (counter-clockwise) with
/// bilinear sampling; samples outside the source replicate the edge.
pub fn rotate(image: &RgbImage, degrees: f64) -> RgbImage {
    if degrees == 0.0 {
        return image.clone();
    }
    let (w, h) = image.dimensions();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let max_x = w as f64 - 1.0;
    let max_y = h as f64 - 1.0;
    RgbImage::from_fn(w, h, |x, y| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        // inverse map: rotate the output coordinate back by -degrees
        let sx = (cos * dx - sin * dy + cx).clamp(0.0, max_x);
        let sy = (sin * dx + cos * dy + cy).clamp(0.0, max_y);
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as u32, y0 as u32);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let mut px = [0u8; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let p = |x: u32, y: u32| image.get_pixel(x, y)[c] as f64;
            let v = p(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + p(x1, y0) * fx * (1.0 - fy)
                + p(x0, y1) * (1.0 - fx) * fy
                + p(x1, y1) * fx * fy;
            *out = v.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

/// Resize, then apply each op with draws from `rng`. Deterministic for a
/// given image, config and generator state.
pub fn augment<R: Rng + ?Sized>(image: &RgbImage, config: &AugmentationConfig, rng: &mut R) -> Result<RgbImage> {
    config.validate()?;
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::InvalidParameter("empty image".into()));
    }
    let mut out = resize_square(image, config.resize_to);
    for op in &config.ops {
        out = match *op {
            AugmentOp::RandomCrop { size } => {
                let x0 = rng.random_range(0..=out.width() - size);
                let y0 = rng.random_range(0..=out.height() - size);
                crop(&out, x0, y0, size)?
            }
            AugmentOp::RandomRotation { max_degrees } => {
                let angle = if max_degrees > 0.0 {
                    rng.random_range(-max_degrees..=max_degrees)
                } else {
                    0.0
                };
                rotate(&out, angle)
            }
        };
    }
    Ok(out)
}

/// Deterministic evaluation view: resize, then centre crop to the output
/// size. No rotation.
pub fn center_view(image: &RgbImage, config: &AugmentationConfig) -> Result<RgbImage> {
    config.validate()?;
    let resized = resize_square(image, config.resize_to);
    let size = config.output_size();
    let off = (config.resize_to - size) / 2;
    crop(&resized, off, off, size)
}
