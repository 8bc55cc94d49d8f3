use image::RgbImage;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Built-in patch-attention encoder.
    ReferenceTiny,
    /// Pluggable pretrained backbone behind [`ImageEncoder`].
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    /// Square input side in pixels.
    pub input_size: u32,
    /// Embedding dimension D.
    pub embed_dim: usize,
    pub patch_size: u32,
    pub depth: usize,
    pub mlp_hidden: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_ref: Option<String>,
}

impl EncoderSpec {
    pub fn reference_tiny(input_size: u32, embed_dim: usize) -> Self {
        EncoderSpec {
            kind: EncoderKind::ReferenceTiny,
            input_size,
            embed_dim,
            patch_size: 8,
            depth: 2,
            mlp_hidden: 2 * embed_dim,
            external_ref: None,
        }
    }

    pub fn external(reference: impl Into<String>, input_size: u32, embed_dim: usize) -> Self {
        EncoderSpec {
            kind: EncoderKind::External,
            input_size,
            embed_dim,
            patch_size: 0,
            depth: 0,
            mlp_hidden: 0,
            external_ref: Some(reference.into()),
        }
    }

    pub fn grid_side(&self) -> usize {
        (self.input_size / self.patch_size) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.input_size == 0 {
            return Err(Error::InvalidParameter(
                "encoder needs positive input_size and embed_dim".into(),
            ));
        }
        match self.kind {
            EncoderKind::External if self.external_ref.is_none() => {
                Err(Error::InvalidParameter("external encoder needs an external_ref".into()))
            }
            EncoderKind::External => Ok(()),
            EncoderKind::ReferenceTiny => {
                if self.patch_size == 0 || !self.input_size.is_multiple_of(self.patch_size) {
                    return Err(Error::InvalidParameter(format!(
                        "input size {} is not a multiple of patch size {}",
                        self.input_size, self.patch_size
                    )));
                }
                if self.depth == 0 || self.mlp_hidden == 0 {
                    return Err(Error::InvalidParameter(
                        "reference encoder needs depth >= 1 and mlp_hidden >= 1".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Encoder output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub sample_id: String,
    pub vector: Array1<f64>,
}

/// Anything that maps an input-sized image to a D-dimensional vector.
/// Pretrained backbones plug in here; loading their weights is up to the
/// host.
pub trait ImageEncoder {
    fn spec(&self) -> &EncoderSpec;

    fn encode(&self, image: &RgbImage) -> Result<Array1<f64>>;

    /// `k×D` matrix of embeddings.
    fn encode_batch(&self, images: &[RgbImage]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((images.len(), self.spec().embed_dim));
        for (i, img) in images.iter().enumerate() {
            out.row_mut(i).assign(&self.encode(img)?);
        }
        Ok(out)
    }

    fn embed(&self, sample_id: &str, image: &RgbImage) -> Result<Embedding> {
        Ok(Embedding {
            sample_id: sample_id.to_string(),
            vector: self.encode(image)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    patch_w: usize,
    patch_b: usize,
    pos: usize,
    blocks: Vec<BlockLayout>,
    final_g: usize,
    final_b: usize,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// `1×D` pooled embedding.
    pub embedding: Var,
    /// Token grid after each block, `T×D` in raster order.
    pub block_outputs: Vec<Var>,
    pub grid: (usize, usize),
}

/// Patchify, linear embed, `depth` pre-norm blocks of single-head
/// attention and a ReLU feed-forward with residuals, final layer norm,
/// mean pool.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyEncoder {
    spec: EncoderSpec,
    params: ParamStore,
    layout: Layout,
}

fn block_name(i: usize, part: &str) -> String {
    format!("block{i}.{part}")
}

impl TinyEncoder {
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.kind != EncoderKind::ReferenceTiny {
            return Err(Error::InvalidParameter(
                "only the reference encoder can be initialized locally".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.embed_dim;
        let patch_dim = (spec.patch_size * spec.patch_size * 3) as usize;
        let tokens = spec.grid_side().pow(2);
        let mut p = ParamStore::new();
        p.push_normal("patch.w", (patch_dim, d), 1.0 / (patch_dim as f64).sqrt(), &mut rng);
        p.push("patch.b", Array2::zeros((1, d)));
        p.push_normal("pos", (tokens, d), 0.02, &mut rng);
        let inv_d = 1.0 / (d as f64).sqrt();
        for i in 0..spec.depth {
            p.push(block_name(i, "ln1.g"), Array2::ones((1, d)));
            p.push(block_name(i, "ln1.b"), Array2::zeros((1, d)));
            for w in ["wq", "wk", "wv", "wo"] {
                p.push_normal(&block_name(i, w), (d, d), inv_d, &mut rng);
            }
            p.push(block_name(i, "ln2.g"), Array2::ones((1, d)));
            p.push(block_name(i, "ln2.b"), Array2::zeros((1, d)));
            p.push_normal(&block_name(i, "mlp.w1"), (d, spec.mlp_hidden), inv_d, &mut rng);
            p.push(block_name(i, "mlp.b1"), Array2::zeros((1, spec.mlp_hidden)));
            let inv_h = 1.0 / (spec.mlp_hidden as f64).sqrt();
            p.push_normal(&block_name(i, "mlp.w2"), (spec.mlp_hidden, d), inv_h, &mut rng);
            p.push(block_name(i, "mlp.b2"), Array2::zeros((1, d)));
        }
        p.push("final.ln.g", Array2::ones((1, d)));
        p.push("final.ln.b", Array2::zeros((1, d)));
        TinyEncoder::from_params(spec, p)
    }

    /// Rebuilds an encoder from stored parameters, checking names and shapes.
    pub fn from_params(spec: EncoderSpec, params: ParamStore) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        let h = spec.mlp_hidden;
        let patch_dim = (spec.patch_size * spec.patch_size * 3) as usize;
        let tokens = spec.grid_side().pow(2);
        let find = |name: &str, shape: (usize, usize)| -> Result<usize> {
            let i = params
                .index_of(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing encoder parameter `{name}`")))?;
            if params.get(i).dim() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    params.get(i).dim()
                )));
            }
            Ok(i)
        };
        let blocks = (0..spec.depth)
            .map(|i| {
                Ok(BlockLayout {
                    ln1_g: find(&block_name(i, "ln1.g"), (1, d))?,
                    ln1_b: find(&block_name(i, "ln1.b"), (1, d))?,
                    wq: find(&block_name(i, "wq"), (d, d))?,
                    wk: find(&block_name(i, "wk"), (d, d))?,
                    wv: find(&block_name(i, "wv"), (d, d))?,
                    wo: find(&block_name(i, "wo"), (d, d))?,
                    ln2_g: find(&block_name(i, "ln2.g"), (1, d))?,
                    ln2_b: find(&block_name(i, "ln2.b"), (1, d))?,
                    w1: find(&block_name(i, "mlp.w1"), (d, h))?,
                    b1: find(&block_name(i, "mlp.b1"), (1, h))?,
                    w2: find(&block_name(i, "mlp.w2"), (h, d))?,
                    b2: find(&block_name(i, "mlp.b2"), (1, d))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let layout = Layout {
            patch_w: find("patch.w", (patch_dim, d))?,
            patch_b: find("patch.b", (1, d))?,
            pos: find("pos", (tokens, d))?,
            blocks,
            final_g: find("final.ln.g", (1, d))?,
            final_b: find("final.ln.b", (1, d))?,
        };
        Ok(TinyEncoder { spec, params, layout })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Layer tags with spatial structure, shallowest first.
    pub fn spatial_layers(&self) -> Vec<String> {
        (0..self.spec.depth).map(|i| format!("block{i}")).collect()
    }

    /// Token matrix `T×(p·p·3)`, raster order over patches and, within a
    /// patch, over rows, columns, channels. Pixels map to `(v/255 - 0.5)/0.25`.
    pub fn patchify(&self, image: &RgbImage) -> Result<Array2<f64>> {
        let s = self.spec.input_size;
        if image.dimensions() != (s, s) {
            return Err(Error::Shape(format!(
                "encoder expects {s}x{s} input, got {}x{}",
                image.width(),
                image.height()
            )));
        }
        let p = self.spec.patch_size;
        let side = self.spec.grid_side();
        let patch_dim = (p * p * 3) as usize;
        let mut out = Array2::zeros((side * side, patch_dim));
        for gy in 0..side {
            for gx in 0..side {
                let mut row = out.row_mut(gy * side + gx);
                let mut j = 0;
                for py in 0..p {
                    for px in 0..p {
                        let pixel = image.get_pixel(gx as u32 * p + px, gy as u32 * p + py);
                        for c in 0..3 {
                            row[j] = (pixel[c] as f64 / 255.0 - 0.5) / 0.25;
                            j += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Forward pass on `tape`, with parameters already bound as `vars`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], image: &RgbImage) -> Result<EncoderTrace> {
        let l = &self.layout;
        let patches = tape.constant(self.patchify(image)?);
        let x = tape.matmul(patches, vars[l.patch_w]);
        let x = tape.add_row(x, vars[l.patch_b]);
        let mut x = tape.add(x, vars[l.pos]);
        let mut block_outputs = Vec::with_capacity(l.blocks.len());
        for b in &l.blocks {
            let h = tape.layer_norm(x, vars[b.ln1_g], vars[b.ln1_b]);
            let q = tape.matmul(h, vars[b.wq]);
            let k = tape.matmul(h, vars[b.wk]);
            let v = tape.matmul(h, vars[b.wv]);
            let a = tape.attention(q, k, v)?;
            let a = tape.matmul(a, vars[b.wo]);
            x = tape.add(x, a);
            let h = tape.layer_norm(x, vars[b.ln2_g], vars[b.ln2_b]);
            let h = tape.matmul(h, vars[b.w1]);
            let h = tape.add_row(h, vars[b.b1]);
            let h = tape.relu(h);
            let h = tape.matmul(h, vars[b.w2]);
            let h = tape.add_row(h, vars[b.b2]);
            x = tape.add(x, h);
            block_outputs.push(x);
        }
        let x = tape.layer_norm(x, vars[l.final_g], vars[l.final_b]);
        let embedding = tape.mean_rows(x);
        let side = self.spec.grid_side();
        Ok(EncoderTrace {
            embedding,
            block_outputs,
            grid: (side, side),
        })
    }

    /// Encodes several images on one tape.
    pub fn encode_many(&self, images: &[RgbImage]) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let rows = images
            .iter()
            .map(|img| Ok(self.forward(&mut tape, &vars, img)?.embedding))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Array2::zeros((0, self.spec.embed_dim)));
        }
        let all = tape.concat_rows(&rows);
        Ok(tape.value(all).clone())
    }
}

impl ImageEncoder for TinyEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, image: &RgbImage) -> Result<Array1<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let trace = self.forward(&mut tape, &vars, image)?;
        Ok(tape.value(trace.embedding).row(0).to_owned())
    }

    fn encode_batch(&self, images: &[RgbImage]) -> Result<Array2<f64>> {
        self.encode_many(images)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn noise_image(size: u32, seed: u32) -> RgbImage {
        RgbImage::from_fn(size, size, |x, y| {
            let v = (x * 31 + y * 17 + seed * 101) % 256;
            Rgb([v as u8, (v * 3 % 256) as u8, (255 - v) as u8])
        })
    }

    #[test]
    fn shape_contract() {
        let enc = TinyEncoder::new(EncoderSpec::reference_tiny(64, 32), 1).unwrap();
        let e = enc.encode(&noise_image(64, 0)).unwrap();
        assert_eq!(e.len(), 32);
        assert!(e.iter().all(|v| v.is_finite()));
        assert!(enc.encode(&noise_image(32, 0)).is_err());
    }

    #[test]
    fn deterministic_inference() {
        let enc = TinyEncoder::new(EncoderSpec::reference_tiny(16, 8), 3).unwrap();
        let img = noise_image(16, 4);
        assert_eq!(enc.encode(&img).unwrap(), enc.encode(&img.clone()).unwrap());
    }

    #[test]
    fn batch_matches_singles() {
        let enc = TinyEncoder::new(EncoderSpec::reference_tiny(16, 8), 5).unwrap();
        let imgs: Vec<RgbImage> = (0..4).map(|i| noise_image(16, i)).collect();
        let batch = enc.encode_batch(&imgs).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let single = enc.encode(img).unwrap();
            for (a, b) in batch.row(i).iter().zip(single.iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn from_params_checks_shapes() {
        let enc = TinyEncoder::new(EncoderSpec::reference_tiny(16, 8), 5).unwrap();
        let mut wrong = EncoderSpec::reference_tiny(16, 8);
        wrong.embed_dim = 4;
        assert!(TinyEncoder::from_params(wrong, enc.params().clone()).is_err());
        assert!(TinyEncoder::from_params(EncoderSpec::reference_tiny(16, 8), ParamStore::new()).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(EncoderSpec::reference_tiny(20, 8).validate().is_err());
        assert!(EncoderSpec::external("swin-b", 384, 1024).validate().is_ok());
        assert!(TinyEncoder::new(EncoderSpec::external("swin-b", 384, 1024), 0).is_err());
    }
}
