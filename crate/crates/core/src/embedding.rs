//! Embedding export and cluster-quality indices.
//!
//! Indices are computed on raw encoder embeddings with Euclidean distances
//! and arithmetic centroids. Clusters are the L3 labels.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataset::{center_view, AugmentationConfig, Split};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ImageEncoder};
use crate::taxonomy::Taxonomy;
use crate::training::TrainingData;

const MAGIC_LINE: &str = "habclass-embeddings";

/// Which coordinates the indices were computed on.
pub const EMBEDDING_SPACE: &str = "raw_encoder";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub matrix: Array2<f64>,
    pub labels: Vec<String>,
    pub sample_ids: Vec<String>,
    pub encoder_id: String,
    pub split_id: String,
}

impl EmbeddingSet {
    pub fn new(matrix: Array2<f64>, labels: Vec<String>, sample_ids: Vec<String>) -> Result<Self> {
        let n = matrix.nrows();
        if n < 2 {
            return Err(Error::InvalidParameter(format!("embedding set needs n >= 2, got {n}")));
        }
        if labels.len() != n || sample_ids.len() != n {
            return Err(Error::Shape(format!(
                "{n} embeddings but {} labels and {} ids",
                labels.len(),
                sample_ids.len()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding matrix has non-finite entries".into()));
        }
        Ok(EmbeddingSet {
            matrix,
            labels,
            sample_ids,
            encoder_id: String::new(),
            split_id: String::new(),
        })
    }

    /// Convenience for anonymous points (ids are row numbers).
    pub fn from_points(matrix: Array2<f64>, labels: Vec<String>) -> Result<Self> {
        let ids = (0..matrix.nrows()).map(|i| i.to_string()).collect();
        EmbeddingSet::new(matrix, labels, ids)
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn check_labels(&self, taxonomy: &Taxonomy) -> Result<()> {
        match self.labels.iter().find(|l| !taxonomy.is_l3(l)) {
            Some(l) => Err(Error::UnknownClass(l.clone())),
            None => Ok(()),
        }
    }

    /// Rows whose label satisfies `keep`, in original order.
    pub fn restrict(&self, keep: impl Fn(&str) -> bool) -> Result<Self> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.labels[i])).collect();
        let matrix = Array2::from_shape_fn((rows.len(), self.dim()), |(r, c)| self.matrix[[rows[r], c]]);
        let mut out = EmbeddingSet::new(
            matrix,
            rows.iter().map(|&i| self.labels[i].clone()).collect(),
            rows.iter().map(|&i| self.sample_ids[i].clone()).collect(),
        )?;
        out.encoder_id = self.encoder_id.clone();
        out.split_id = self.split_id.clone();
        Ok(out)
    }

    fn sidecar(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".ids.csv");
        PathBuf::from(s)
    }

    /// Writes the binary matrix to `path` and ids plus labels to
    /// `<path>.ids.csv`. Values are stored as little-endian `f32`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = format!(
            "{MAGIC_LINE} n={} dim={} encoder={} split={}\n",
            self.len(),
            self.dim(),
            self.encoder_id,
            self.split_id
        )
        .into_bytes();
        for v in self.matrix.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let side = Self::sidecar(path);
        let mut w = csv::Writer::from_path(&side).map_err(|e| Error::format(&side, e.to_string()))?;
        w.write_record(["sample_id", "label"])?;
        for (id, label) in self.sample_ids.iter().zip(&self.labels) {
            w.write_record([id, label])?;
        }
        w.flush().map_err(|e| Error::io(&side, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format(path, "header is not UTF-8"))?;
        let mut fields = header.split(' ');
        if fields.next() != Some(MAGIC_LINE) {
            return Err(Error::format(path, "not an embedding file"));
        }
        let kv: BTreeMap<&str, &str> = fields.filter_map(|f| f.split_once('=')).collect();
        let num = |k: &str| -> Result<usize> {
            kv.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(path, format!("bad or missing `{k}` in header")))
        };
        let (n, dim) = (num("n")?, num("dim")?);
        let body = &bytes[nl + 1..];
        if body.len() != 4 * n * dim {
            return Err(Error::format(
                path,
                format!("expected {} data bytes, found {}", 4 * n * dim, body.len()),
            ));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let matrix = Array2::from_shape_vec((n, dim), values).expect("sized above");
        let side = Self::sidecar(path);
        let mut ids = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let reader = csv::Reader::from_path(&side).map_err(|e| Error::format(&side, e.to_string()))?;
        for row in reader.into_records() {
            let row = row.map_err(|e| Error::format(&side, e.to_string()))?;
            ids.push(row.get(0).unwrap_or_default().to_string());
            labels.push(row.get(1).unwrap_or_default().to_string());
        }
        let mut set = EmbeddingSet::new(matrix, labels, ids)?;
        set.encoder_id = kv.get("encoder").unwrap_or(&"").to_string();
        set.split_id = kv.get("split").unwrap_or(&"").to_string();
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportOutcome {
    pub set: EmbeddingSet,
    /// Records whose image could not be loaded.
    pub skipped: usize,
}

/// Inference-mode embeddings for one split, in manifest order. Unreadable
/// images are logged and skipped.
pub fn export_embeddings(
    checkpoint: &Checkpoint,
    data: &TrainingData,
    subset: Split,
    view: &AugmentationConfig,
) -> Result<ExportOutcome> {
    let records = data.subset(subset)?;
    if records.is_empty() {
        return Err(Error::Dataset(format!("{subset} split is empty")));
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut skipped = 0;
    for (record, _) in records {
        let image = match data.images.load(record) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", record.sample_id);
                skipped += 1;
                continue;
            }
        };
        rows.push(checkpoint.encoder.encode(&center_view(&image, view)?)?);
        labels.push(record.l3_label.clone());
        ids.push(record.sample_id.clone());
    }
    let dim = checkpoint.encoder.spec().embed_dim;
    let mut matrix = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        matrix.row_mut(i).assign(r);
    }
    let mut set = EmbeddingSet::new(matrix, labels, ids)?;
    set.encoder_id = checkpoint.encoder.params().fingerprint()[..16].to_string();
    set.split_id = format!("{subset}-seed{}", data.split.seed);
    Ok(ExportOutcome { set, skipped })
}

struct Clusters {
    centroids: Vec<Array1<f64>>,
    members: Vec<Vec<usize>>,
    names: Vec<String>,
}

fn clusters(set: &EmbeddingSet) -> Clusters {
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in set.labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let mut out = Clusters {
        centroids: Vec::new(),
        members: Vec::new(),
        names: Vec::new(),
    };
    for (name, rows) in by_label {
        let mut c = Array1::zeros(set.dim());
        for &r in &rows {
            c += &set.matrix.row(r);
        }
        c /= rows.len() as f64;
        out.centroids.push(c);
        out.members.push(rows);
        out.names.push(name.to_string());
    }
    out
}

fn dist2(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn need_two_clusters(k: usize) -> Result<()> {
    if k < 2 {
        Err(Error::Degenerate(format!(
            "cluster indices need at least 2 clusters, found {k}"
        )))
    } else {
        Ok(())
    }
}

/// `[tr(B)/(k-1)] / [tr(W)/(n-k)]`. Zero within-cluster scatter yields
/// `f64::INFINITY`.
pub fn calinski_harabasz(set: &EmbeddingSet) -> Result<f64> {
    let cl = clusters(set);
    let (n, k) = (set.len(), cl.centroids.len());
    need_two_clusters(k)?;
    let overall = set.matrix.mean_axis(ndarray::Axis(0)).expect("n >= 2");
    let mut between = 0.0;
    let mut within = 0.0;
    for (c, rows) in cl.centroids.iter().zip(&cl.members) {
        between += rows.len() as f64 * dist2(c.view(), overall.view());
        for &r in rows {
            within += dist2(set.matrix.row(r), c.view());
        }
    }
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    if n <= k {
        return Err(Error::Degenerate(format!(
            "need more samples ({n}) than clusters ({k})"
        )));
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// Mean over clusters of `max_{j≠i} (s_i + s_j) / d_ij`, with `s` the mean
/// distance to the centroid and `d` the centroid distance.
pub fn davies_bouldin(set: &EmbeddingSet) -> Result<f64> {
    let cl = clusters(set);
    let k = cl.centroids.len();
    need_two_clusters(k)?;
    let spread: Vec<f64> = cl
        .centroids
        .iter()
        .zip(&cl.members)
        .map(|(c, rows)| {
            rows.iter()
                .map(|&r| dist2(set.matrix.row(r), c.view()).sqrt())
                .sum::<f64>()
                / rows.len() as f64
        })
        .collect();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in (0..k).filter(|&j| j != i) {
            let d = dist2(cl.centroids[i].view(), cl.centroids[j].view()).sqrt();
            if d == 0.0 {
                return Err(Error::Degenerate(format!(
                    "clusters `{}` and `{}` have coincident centroids",
                    cl.names[i], cl.names[j]
                )));
            }
            worst = worst.max((spread[i] + spread[j]) / d);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "group")]
pub enum Scope {
    Overall,
    Group(String),
}

mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("+inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Num {
            F(f64),
            S(String),
        }
        match Num::deserialize(d)? {
            Num::F(v) => Ok(v),
            Num::S(s) if s == "+inf" => Ok(f64::INFINITY),
            Num::S(s) => Err(serde::de::Error::custom(format!("bad index value `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterQualityReport {
    pub scope: Scope,
    /// `+inf` when within-cluster scatter is zero.
    #[serde(with = "inf_as_string")]
    pub ch_index: f64,
    pub db_index: f64,
    pub k: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedQuality {
    pub space: String,
    pub reports: Vec<ClusterQualityReport>,
    /// Why scopes were skipped.
    pub notes: Vec<String>,
}

fn report(scope: Scope, set: &EmbeddingSet) -> Result<ClusterQualityReport> {
    Ok(ClusterQualityReport {
        ch_index: calinski_harabasz(set)?,
        db_index: davies_bouldin(set)?,
        k: clusters(set).centroids.len(),
        n: set.len(),
        scope,
    })
}

/// Overall indices plus one report per L2 group that has at least two L3
/// classes in the taxonomy, restricted to that group's rows. Scopes that
/// cannot be scored are listed in `notes` instead.
pub fn grouped_quality(set: &EmbeddingSet, taxonomy: &Taxonomy) -> GroupedQuality {
    let mut out = GroupedQuality {
        space: EMBEDDING_SPACE.to_string(),
        reports: Vec::new(),
        notes: Vec::new(),
    };
    match report(Scope::Overall, set) {
        Ok(r) => out.reports.push(r),
        Err(e) => out.notes.push(format!("overall skipped: {e}")),
    }
    for group in taxonomy.l2_order() {
        let children = taxonomy.children(group);
        if children.len() < 2 {
            out.notes.push(format!("{group} skipped: single L3 class"));
            continue;
        }
        let scored = set
            .restrict(|l| children.contains(&l))
            .and_then(|sub| report(Scope::Group(group.clone()), &sub));
        match scored {
            Ok(r) => out.reports.push(r),
            Err(e) => out.notes.push(format!("{group} skipped: {e}")),
        }
    }
    out
}

impl GroupedQuality {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_json().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn set(points: &[f64], labels: &[&str]) -> EmbeddingSet {
        let m = Array2::from_shape_vec((points.len(), 1), points.to_vec()).unwrap();
        EmbeddingSet::from_points(m, labels.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn one_dimensional_fixture() {
        let s = set(&[0.0, 2.0, 10.0, 12.0], &["a", "a", "b", "b"]);
        assert!((calinski_harabasz(&s).unwrap() - 50.0).abs() < 1e-9);
        assert!((davies_bouldin(&s).unwrap() - 0.2).abs() < 1e-9);
    }

    #[test]
    fn singletons_give_infinite_ch() {
        let s = set(&[0.0, 5.0], &["a", "b"]);
        assert_eq!(calinski_harabasz(&s).unwrap(), f64::INFINITY);
    }

    #[test]
    fn errors() {
        let one = set(&[0.0, 1.0, 2.0], &["a", "a", "a"]);
        assert!(calinski_harabasz(&one).is_err());
        assert!(davies_bouldin(&one).is_err());
        let same_centroid = set(&[-1.0, 1.0, -2.0, 2.0], &["a", "a", "b", "b"]);
        let msg = davies_bouldin(&same_centroid).unwrap_err().to_string();
        assert!(msg.contains("`a`") && msg.contains("`b`"), "{msg}");
        assert!(EmbeddingSet::from_points(array![[1.0]], vec!["a".into()]).is_err());
    }

    #[test]
    fn ch_grows_with_separation() {
        let near = set(&[0.0, 2.0, 10.0, 12.0], &["a", "a", "b", "b"]);
        let far = set(&[0.0, 2.0, 20.0, 22.0], &["a", "a", "b", "b"]);
        assert!(calinski_harabasz(&far).unwrap() > calinski_harabasz(&near).unwrap());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = set(&[0.5, 2.25, 10.0, 12.0], &["a", "a", "b", "b"]);
        s.encoder_id = "enc".into();
        s.split_id = "test-seed1".into();
        let p = dir.path().join("emb.bin");
        s.write(&p).unwrap();
        assert_eq!(EmbeddingSet::read(&p).unwrap(), s);
        let first = fs::read(&p).unwrap();
        s.write(&p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }

    #[test]
    fn default_taxonomy_group_structure() {
        let tax = Taxonomy::default();
        let labels: Vec<String> = tax.l3_order().iter().flat_map(|c| [c.clone(), c.clone()]).collect();
        let n = labels.len();
        let m = Array2::from_shape_fn((n, 2), |(i, j)| (i / 2) as f64 * 3.0 + (i % 2) as f64 + j as f64);
        let q = grouped_quality(&EmbeddingSet::from_points(m, labels).unwrap(), &tax);
        let scopes: Vec<Scope> = q.reports.iter().map(|r| r.scope.clone()).collect();
        let expect: Vec<Scope> = std::iter::once(Scope::Overall)
            .chain(
                [
                    "grassland",
                    "woodland",
                    "wetland",
                    "sparsely_vegetated_land",
                    "marine_inlets_and_transitional_waters",
                ]
                .iter()
                .map(|g| Scope::Group(g.to_string())),
            )
            .collect();
        assert_eq!(scopes, expect);
        assert_eq!(q.notes.len(), 4);
    }

    #[test]
    fn infinite_index_serializes() {
        let r = ClusterQualityReport {
            scope: Scope::Overall,
            ch_index: f64::INFINITY,
            db_index: 0.5,
            k: 2,
            n: 2,
        };
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"+inf\""));
        let back: ClusterQualityReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
