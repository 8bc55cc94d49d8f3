//! GradCAM saliency maps and heat overlays.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{Checkpoint, ImageEncoder, Tape};

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// `h×w`, values in `[0, 1]`.
    pub grid: Array2<f64>,
    /// Bilinear upsampling of `grid` to the input resolution (rows = height).
    pub upsampled: Array2<f64>,
    pub target_class: String,
    pub layer_tag: String,
}

impl SaliencyMap {
    /// The grid as comma-separated rows.
    pub fn grid_csv(&self) -> String {
        let mut out = String::new();
        for row in self.grid.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// A spatial feature map and the gradient of the target score with respect
/// to it. Rows are grid cells in raster order, columns are channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGradient {
    pub features: Array2<f64>,
    pub gradient: Array2<f64>,
    /// `(h, w)` with `h·w` equal to the row count.
    pub grid: (usize, usize),
}

/// Models that can expose a layer's activations and target gradients.
pub trait GradCamBackend {
    fn class_order(&self) -> &[String];

    /// Layer tags with spatial structure, shallowest first.
    fn spatial_layers(&self) -> Vec<String>;

    fn feature_gradient(&self, image: &RgbImage, target: usize, layer: &str) -> Result<FeatureGradient>;
}

/// Wraps an inference-only encoder. It has no gradients to offer, so every
/// GradCAM request fails.
pub struct InferenceOnly<'a> {
    pub encoder: &'a dyn ImageEncoder,
    pub class_order: Vec<String>,
}

impl GradCamBackend for InferenceOnly<'_> {
    fn class_order(&self) -> &[String] {
        &self.class_order
    }

    fn spatial_layers(&self) -> Vec<String> {
        Vec::new()
    }

    fn feature_gradient(&self, _: &RgbImage, _: usize, _: &str) -> Result<FeatureGradient> {
        Err(Error::Explain(format!(
            "gradient unavailable: {} is an inference-only backbone",
            self.encoder.spec().external_ref.as_deref().unwrap_or("encoder")
        )))
    }
}

impl GradCamBackend for Checkpoint {
    fn class_order(&self) -> &[String] {
        &self.class_order
    }

    fn spatial_layers(&self) -> Vec<String> {
        self.encoder.spatial_layers()
    }

    fn feature_gradient(&self, image: &RgbImage, target: usize, layer: &str) -> Result<FeatureGradient> {
        let head = self.require_head()?;
        let layers = self.spatial_layers();
        let Some(depth) = layers.iter().position(|l| l == layer) else {
            return Err(Error::Explain(format!(
                "layer `{layer}` has no spatial feature map; choose one of {}",
                layers.join(", ")
            )));
        };
        let mut tape = Tape::new();
        let enc_vars = self.encoder.params().bind(&mut tape, true);
        let head_vars = head.params().bind(&mut tape, false);
        let trace = self.encoder.forward(&mut tape, &enc_vars, image)?;
        let logits = head.logits(&mut tape, &head_vars, trace.embedding);
        let mut seed = Array2::zeros((1, head.class_order().len()));
        seed[[0, target]] = 1.0;
        let grads = tape.backward_with(logits, seed);
        let node = trace.block_outputs[depth];
        let features = tape.value(node).clone();
        let gradient = grads.get_or_zeros(node, features.dim());
        Ok(FeatureGradient {
            features,
            gradient,
            grid: trace.grid,
        })
    }
}

/// The normalized `h×w` class activation map: channel weights are the
/// spatial mean of the gradient, the map is the rectified weighted channel
/// sum, divided by its maximum when that is positive.
pub fn cam_grid(fg: &FeatureGradient) -> Result<Array2<f64>> {
    let (h, w) = fg.grid;
    let (t, c) = fg.features.dim();
    if t != h * w || fg.gradient.dim() != (t, c) || t == 0 {
        return Err(Error::Shape(format!(
            "features {:?} / gradient {:?} do not fit a {h}x{w} grid",
            fg.features.dim(),
            fg.gradient.dim()
        )));
    }
    let weights = fg.gradient.mean_axis(ndarray::Axis(0)).expect("t > 0");
    let cam = fg.features.dot(&weights).mapv(|v| v.max(0.0));
    let max = cam.fold(0.0f64, |m, &v| m.max(v));
    let cam = if max > 0.0 { cam / max } else { cam };
    Ok(cam.into_shape_with_order((h, w)).expect("t = h*w"))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn upsample_bilinear(grid: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = grid.dim();
    let coord = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let x = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, x - lo as f64)
    };
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = coord(y, h, height);
        let (x0, x1, fx) = coord(x, w, width);
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
        let bottom = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// GradCAM for `target_class` at `layer` (default: the deepest spatial
/// layer). The image must already be at the model's input resolution.
pub fn gradcam<B: GradCamBackend + ?Sized>(
    model: &B,
    image: &RgbImage,
    target_class: &str,
    layer: Option<&str>,
) -> Result<SaliencyMap> {
    let target = model
        .class_order()
        .iter()
        .position(|c| c == target_class)
        .ok_or_else(|| Error::UnknownClass(target_class.to_string()))?;
    let layer = match layer {
        Some(l) => l.to_string(),
        None => model
            .spatial_layers()
            .pop()
            .ok_or_else(|| Error::Explain("model exposes no spatial layer".into()))?,
    };
    let fg = model.feature_gradient(image, target, &layer)?;
    let grid = cam_grid(&fg)?;
    let upsampled = upsample_bilinear(&grid, image.height() as usize, image.width() as usize);
    Ok(SaliencyMap {
        grid,
        upsampled,
        target_class: target_class.to_string(),
        layer_tag: layer,
    })
}

/// Jet-style palette over `[0, 1]`.
pub fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ramp(3.0) * 255.0, ramp(2.0) * 255.0, ramp(1.0) * 255.0]
}

/// Blends the heat palette over `image` with per-pixel opacity
/// `max_alpha · map`. A zero map leaves the image untouched.
pub fn overlay(map: &SaliencyMap, image: &RgbImage, max_alpha: f64) -> Result<RgbImage> {
    let (h, w) = map.upsampled.dim();
    if (image.width() as usize, image.height() as usize) != (w, h) {
        return Err(Error::Shape(format!(
            "map is {w}x{h} but image is {}x{}",
            image.width(),
            image.height()
        )));
    }
    let alpha = max_alpha.clamp(0.0, 1.0);
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let v = map.upsampled[[y as usize, x as usize]];
        let a = alpha * v.clamp(0.0, 1.0);
        let heat = heat_color(v);
        let src = image.get_pixel(x, y);
        let mut px = [0u8; 3];
        for c in 0..3 {
            px[c] = ((1.0 - a) * src[c] as f64 + a * heat[c]).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    }))
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// File name used for the `index`-th overlay of a batch.
pub fn overlay_file_name(index: usize, sample_id: &str, class: &str) -> String {
    format!("gradcam_{index:03}_{}_{}.png", file_safe(sample_id), file_safe(class))
}

/// Writes one PNG overlay per `(sample_id, map, image)` into `dir` and
/// returns the paths in input order.
pub fn write_overlays(
    items: &[(String, SaliencyMap, RgbImage)],
    dir: impl AsRef<Path>,
    max_alpha: f64,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::with_capacity(items.len());
    for (i, (id, map, image)) in items.iter().enumerate() {
        let path = dir.join(overlay_file_name(i, id, &map.target_class));
        overlay(map, image, max_alpha)?.save(&path)?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn map_from(grid: Array2<f64>, size: usize) -> SaliencyMap {
        SaliencyMap {
            upsampled: upsample_bilinear(&grid, size, size),
            grid,
            target_class: "c".into(),
            layer_tag: "l".into(),
        }
    }

    #[test]
    fn cam_is_rectified_and_normalized() {
        let fg = FeatureGradient {
            features: array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [0.0, 0.0]],
            gradient: array![[1.0, -1.0], [1.0, -1.0], [1.0, -1.0], [1.0, -1.0]],
            grid: (2, 2),
        };
        // weights (1, -1): sums 1, -1, 0, 0
        assert_eq!(cam_grid(&fg).unwrap(), array![[1.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn cam_rejects_bad_grid() {
        let fg = FeatureGradient {
            features: Array2::zeros((3, 2)),
            gradient: Array2::zeros((3, 2)),
            grid: (2, 2),
        };
        assert!(cam_grid(&fg).is_err());
    }

    #[test]
    fn upsample_preserves_constants_and_range() {
        let c = upsample_bilinear(&Array2::from_elem((3, 3), 0.4), 12, 12);
        assert!(c.iter().all(|v| (v - 0.4).abs() < 1e-12));
        let u = upsample_bilinear(&array![[0.0, 1.0], [1.0, 0.0]], 8, 8);
        assert!(u.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(u.dim(), (8, 8));
    }

    #[test]
    fn zero_map_overlay_is_identity() {
        let img = RgbImage::from_fn(8, 8, |x, y| Rgb([x as u8 * 20, y as u8 * 30, 7]));
        let out = overlay(&map_from(Array2::zeros((2, 2)), 8), &img, 0.6).unwrap();
        assert_eq!(out, img);
        assert!(overlay(&map_from(Array2::zeros((2, 2)), 4), &img, 0.6).is_err());
    }

    #[test]
    fn file_names_are_stable_and_safe() {
        assert_eq!(overlay_file_name(3, "a/b c", "bog"), "gradcam_003_a_b_c_bog.png");
    }
}
