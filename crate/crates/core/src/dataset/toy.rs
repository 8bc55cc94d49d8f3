use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, MemoryImages, SampleRecord};
use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Difficulty {
    Separable,
    /// The first two classes share a colour signature up to a small shift
    /// and differ mainly in texture.
    ConfusablePair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub image_size: u32,
    pub difficulty: Difficulty,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub manifest: DatasetManifest,
    /// Aligned with `manifest.records()`.
    pub images: Vec<RgbImage>,
    pub designated_pair: Option<(String, String)>,
}

impl ToyDataset {
    pub fn image_source(&self) -> MemoryImages {
        let mut src = MemoryImages::default();
        for (r, img) in self.manifest.records().iter().zip(&self.images) {
            src.insert(r.sample_id.clone(), img.clone());
        }
        src
    }

    /// Writes every image as PNG under `dir` plus `manifest.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (r, img) in self.manifest.records().iter().zip(&self.images) {
            let path = dir.join(&r.image_ref);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            img.save(&path)?;
        }
        self.manifest.write(dir.join("manifest.csv"))
    }
}

/// Toy classes prefer visually meaningful habitat codes; the first two
/// form the confusable pair.
const TOY_CLASS_PREFERENCE: [&str; 6] = [
    "neutral_grassland",
    "improved_grassland",
    "broadleaved_mixed_and_yew_woodland",
    "arable_and_horticulture",
    "bog",
    "dwarf_shrub_heath",
];

struct Signature {
    color: [f64; 3],
    frequency: f64,
    orientation: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn signatures(n: usize, difficulty: Difficulty) -> Vec<Signature> {
    let mut sigs: Vec<Signature> = (0..n)
        .map(|k| Signature {
            color: hsv(k as f64 / n as f64, 0.7, 0.8),
            frequency: 3.0 + 2.0 * (k % 4) as f64,
            orientation: std::f64::consts::PI * k as f64 / n as f64,
        })
        .collect();
    if difficulty == Difficulty::ConfusablePair {
        let base = &sigs[0];
        let shifted = [base.color[0] + 0.04, base.color[1] + 0.02, base.color[2]];
        sigs[1] = Signature {
            color: shifted,
            frequency: base.frequency * 2.0,
            orientation: base.orientation + std::f64::consts::FRAC_PI_2,
        };
    }
    sigs
}

const BACKGROUND: [f64; 3] = [0.45, 0.42, 0.38];

fn render(sig: &Signature, size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let noise = Normal::new(0.0, 0.04).expect("valid sigma");
    let s = size as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let gain = 1.0 + rng.random_range(-0.05..0.05);
    let cx = s * (0.5 + rng.random_range(-0.08..0.08));
    let cy = s * (0.5 + rng.random_range(-0.08..0.08));
    let radius = s * rng.random_range(0.32..0.4);
    let (sin, cos) = sig.orientation.sin_cos();
    RgbImage::from_fn(size, size, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let d = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
        // soft-edged foreground disk carrying the class signature
        let w = (1.0 - (d - radius) / 3.0).clamp(0.0, 1.0);
        let wave = (std::f64::consts::TAU * sig.frequency * (xf * cos + yf * sin) / s + phase).sin();
        let mut px = [0u8; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let fg = gain * sig.color[c] + 0.12 * wave;
            let v = w * fg + (1.0 - w) * BACKGROUND[c] + noise.sample(rng);
            *out = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(px)
    })
}

/// Procedurally textured classes: each class has a colour, stripe
/// frequency and orientation painted in a disk over a shared background.
pub fn generate_toy_dataset(config: &ToyConfig, taxonomy: &Taxonomy) -> Result<ToyDataset> {
    let ToyConfig {
        n_classes,
        n_per_class,
        image_size,
        difficulty,
        seed,
    } = *config;
    if n_classes < 2 {
        return Err(Error::InvalidParameter("toy data needs at least 2 classes".into()));
    }
    if n_classes > taxonomy.l3_count() {
        return Err(Error::InvalidParameter(format!(
            "{n_classes} toy classes requested, taxonomy has {}",
            taxonomy.l3_count()
        )));
    }
    if n_per_class == 0 || image_size < 8 {
        return Err(Error::InvalidParameter(
            "toy data needs n_per_class >= 1 and image_size >= 8".into(),
        ));
    }
    let mut codes: Vec<String> = TOY_CLASS_PREFERENCE
        .iter()
        .filter(|c| taxonomy.is_l3(c))
        .map(|c| c.to_string())
        .collect();
    for c in taxonomy.l3_order() {
        if !codes.contains(c) {
            codes.push(c.clone());
        }
    }
    codes.truncate(n_classes);

    let sigs = signatures(n_classes, difficulty);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_classes * n_per_class);
    let mut images = Vec::with_capacity(n_classes * n_per_class);
    for i in 0..n_per_class {
        for (k, code) in codes.iter().enumerate() {
            let sample_id = format!("toy_{k:02}_{i:04}");
            records.push(SampleRecord {
                image_ref: format!("images/{sample_id}.png"),
                sample_id,
                l3_label: code.clone(),
                source_tag: format!("toy-seed{seed}"),
            });
            images.push(render(&sigs[k], image_size, &mut rng));
        }
    }
    let designated_pair = match difficulty {
        Difficulty::ConfusablePair => Some((codes[0].clone(), codes[1].clone())),
        Difficulty::Separable => None,
    };
    Ok(ToyDataset {
        manifest: DatasetManifest::new(records, taxonomy)?,
        images,
        designated_pair,
    })
}

/// Per-class counts of a 5598-record manifest shaped like the survey data:
/// heavy-tailed, the five major groups holding 98% of records, and two rock
/// classes below the default test threshold.
const CS_SHAPE: [(&str, usize); 18] = [
    ("neutral_grassland", 1300),
    ("improved_grassland", 1250),
    ("acid_grassland", 450),
    ("bracken", 180),
    ("calcareous_grassland", 70),
    ("broadleaved_mixed_and_yew_woodland", 520),
    ("coniferous_woodland", 180),
    ("dwarf_shrub_heath", 420),
    ("bog", 300),
    ("fen_marsh_swamp", 270),
    ("arable_and_horticulture", 550),
    ("urban", 38),
    ("inland_rock", 20),
    ("supra_littoral_rock", 3),
    ("supra_littoral_sediment", 15),
    ("littoral_rock", 2),
    ("littoral_sediment", 25),
    ("montane", 5),
];

/// Image-less manifest with survey-like class counts, for split checks.
pub fn cs_shaped_manifest(taxonomy: &Taxonomy) -> Result<DatasetManifest> {
    let records = CS_SHAPE
        .iter()
        .flat_map(|(code, n)| {
            (0..*n).map(move |i| SampleRecord {
                sample_id: format!("cs_{code}_{i:04}"),
                image_ref: format!("cs/{code}/{i:04}.jpg"),
                l3_label: code.to_string(),
                source_tag: format!("square{:03}", i % 500),
            })
        })
        .collect();
    DatasetManifest::new(records, taxonomy)
}
