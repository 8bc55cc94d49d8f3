//! Sample manifests, stratified splits, training-time augmentation and a
//! procedural toy dataset for desk-scale runs.

mod augment;
mod split;
mod toy;

pub use augment::{augment, center_view, crop, resize_square, rotate, AugmentOp, AugmentationConfig};
pub use split::{largest_remainder, stratified_split, Split, SplitAssignment, SplitFractions, DEFAULT_MIN_TEST_COUNT};
pub use toy::{cs_shaped_manifest, generate_toy_dataset, Difficulty, ToyConfig, ToyDataset};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::{info, warn};

use crate::error::{Error, Result};
use crate::taxonomy::{Level, Taxonomy};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub sample_id: String,
    /// Path relative to the dataset root.
    pub image_ref: String,
    pub l3_label: String,
    pub source_tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    records: Vec<SampleRecord>,
    taxonomy_ref: String,
    index: HashMap<String, usize>,
}

const MANIFEST_HEADER: [&str; 4] = ["sample_id", "image_ref", "l3_label", "source_tag"];

impl DatasetManifest {
    pub fn new(records: Vec<SampleRecord>, taxonomy: &Taxonomy) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Dataset("manifest is empty".into()));
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if !taxonomy.is_l3(&r.l3_label) {
                return Err(Error::UnknownClass(r.l3_label.clone()));
            }
            if index.insert(r.sample_id.clone(), i).is_some() {
                return Err(Error::Dataset(format!("duplicate sample id `{}`", r.sample_id)));
            }
        }
        Ok(DatasetManifest {
            records,
            taxonomy_ref: taxonomy.identity(),
            index,
        })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn taxonomy_ref(&self) -> &str {
        &self.taxonomy_ref
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.index.get(sample_id).map(|&i| &self.records[i])
    }

    /// New manifest holding the given ids, in this manifest's order.
    pub fn restrict(&self, ids: &HashSet<&str>, taxonomy: &Taxonomy) -> Result<Self> {
        let records = self
            .records
            .iter()
            .filter(|r| ids.contains(r.sample_id.as_str()))
            .cloned()
            .collect();
        DatasetManifest::new(records, taxonomy)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER).expect("in-memory write");
        for r in &self.records {
            w.write_record([&r.sample_id, &r.image_ref, &r.l3_label, &r.source_tag])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>, taxonomy: &Taxonomy) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, taxonomy).map_err(|e| match e {
            Error::Csv(c) => Error::format(path, c.to_string()),
            other => other,
        })
    }

    pub fn from_csv(text: &str, taxonomy: &Taxonomy) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::format(
                "<manifest>",
                format!("expected header `{}`", MANIFEST_HEADER.join(",")),
            ));
        }
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row?;
            records.push(SampleRecord {
                sample_id: row[0].to_string(),
                image_ref: row[1].to_string(),
                l3_label: row[2].to_string(),
                source_tag: row[3].to_string(),
            });
        }
        DatasetManifest::new(records, taxonomy)
    }
}

/// Counts of images dropped while building a manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub images_found: usize,
    pub unlabelled: usize,
    pub unknown_class: usize,
}

impl BuildReport {
    pub fn dropped(&self) -> usize {
        self.unlabelled + self.unknown_class
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Scans `root` for images and attaches labels from `label_file`
/// (`image_ref,l3_label[,source_tag]`, paths relative to `root`).
/// Unlabelled images and labels outside the taxonomy are dropped.
pub fn build_manifest(
    root: impl AsRef<Path>,
    label_file: impl AsRef<Path>,
    taxonomy: &Taxonomy,
) -> Result<(DatasetManifest, BuildReport)> {
    let root = root.as_ref();
    let label_file = label_file.as_ref();
    let mut labels: HashMap<String, (String, String)> = HashMap::new();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(label_file)
        .map_err(|e| Error::format(label_file, e.to_string()))?;
    for row in reader.records() {
        let row = row.map_err(|e| Error::format(label_file, e.to_string()))?;
        if row.len() < 2 {
            return Err(Error::format(label_file, "expected `image_ref,l3_label[,source_tag]`"));
        }
        let tag = row.get(2).unwrap_or("").to_string();
        labels.insert(normalize_ref(&row[0]), (row[1].to_string(), tag));
    }

    let mut images: Vec<PathBuf> = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            Error::io(
                root,
                e.into_io_error().unwrap_or_else(|| std::io::ErrorKind::Other.into()),
            )
        })?;
        let is_image = entry.file_type().is_file()
            && entry
                .path()
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image {
            images.push(entry.path().strip_prefix(root).unwrap_or(entry.path()).to_path_buf());
        }
    }

    let mut report = BuildReport {
        images_found: images.len(),
        ..Default::default()
    };
    let mut records = Vec::new();
    for rel in images {
        let image_ref = normalize_ref(&rel.to_string_lossy());
        match labels.get(&image_ref) {
            Some((label, _)) if label.is_empty() => report.unlabelled += 1,
            None => report.unlabelled += 1,
            Some((label, _)) if !taxonomy.is_l3(label) => {
                warn!("dropping {image_ref}: class `{label}` is not in the taxonomy");
                report.unknown_class += 1;
            }
            Some((label, tag)) => {
                let sample_id = image_ref
                    .rsplit_once('.')
                    .map(|(stem, _)| stem.to_string())
                    .unwrap_or_else(|| image_ref.clone());
                records.push(SampleRecord {
                    sample_id,
                    image_ref,
                    l3_label: label.clone(),
                    source_tag: tag.clone(),
                });
            }
        }
    }
    info!(
        "manifest: {} images, {} kept, {} unlabelled, {} unknown class",
        report.images_found,
        records.len(),
        report.unlabelled,
        report.unknown_class
    );
    if records.is_empty() {
        return Err(Error::Dataset(format!("no labelled images under {}", root.display())));
    }
    Ok((DatasetManifest::new(records, taxonomy)?, report))
}

fn normalize_ref(s: &str) -> String {
    s.trim().trim_start_matches("./").replace('\\', "/")
}

/// Per-class record counts at L3 or pushed through to L2 groups.
pub fn class_distribution(
    manifest: &DatasetManifest,
    level: Level,
    taxonomy: &Taxonomy,
) -> Result<BTreeMap<String, usize>> {
    let mut hist = BTreeMap::new();
    for r in manifest.records() {
        let key = match level {
            Level::L3 => r.l3_label.as_str(),
            Level::L2 => taxonomy.parent_of(&r.l3_label)?,
        };
        *hist.entry(key.to_string()).or_insert(0) += 1;
    }
    Ok(hist)
}

/// Where pixel data for manifest records comes from.
pub trait ImageSource {
    fn load(&self, record: &SampleRecord) -> Result<RgbImage>;
}

/// Images on disk below a root directory. Decoding normalizes to 8-bit RGB.
#[derive(Debug, Clone)]
pub struct DirectoryImages {
    root: PathBuf,
}

impl DirectoryImages {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirectoryImages { root: root.into() }
    }
}

impl ImageSource for DirectoryImages {
    fn load(&self, record: &SampleRecord) -> Result<RgbImage> {
        let path = self.root.join(&record.image_ref);
        Ok(image::open(&path)?.to_rgb8())
    }
}

/// Images held in memory, keyed by sample id.
#[derive(Debug, Clone, Default)]
pub struct MemoryImages {
    images: HashMap<String, RgbImage>,
}

impl MemoryImages {
    pub fn insert(&mut self, sample_id: impl Into<String>, image: RgbImage) {
        self.images.insert(sample_id.into(), image);
    }
}

impl ImageSource for MemoryImages {
    fn load(&self, record: &SampleRecord) -> Result<RgbImage> {
        self.images
            .get(&record.sample_id)
            .cloned()
            .ok_or_else(|| Error::Dataset(format!("no image for `{}`", record.sample_id)))
    }
}
