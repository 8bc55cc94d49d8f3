//! Blind annotation benchmark: review subset, annotation files, participant
//! scoring and pairwise agreement.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{largest_remainder, DatasetManifest, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionMatrix, MetricsReport, Normalization, PredictionRecord};
use crate::taxonomy::Taxonomy;

/// Stratified draw of `fraction` of the test split: each class receives its
/// largest-remainder share of `round(fraction · n_test)`. Records keep
/// manifest order.
pub fn draw_expert_subset(
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    fraction: f64,
    seed: u64,
    taxonomy: &Taxonomy,
) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "subset fraction must be in (0, 1], got {fraction}"
        )));
    }
    split.check_covers(manifest)?;
    let mut by_class: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in manifest.records() {
        if split.get(&r.sample_id) == Some(Split::Test) {
            by_class.entry(&r.l3_label).or_default().push(&r.sample_id);
        }
    }
    let counts: Vec<usize> = by_class.values().map(Vec::len).collect();
    let alloc = largest_remainder(&counts, fraction);
    if alloc.iter().sum::<usize>() == 0 {
        return Err(Error::InvalidParameter(format!(
            "fraction {fraction} of {} test records selects nothing",
            counts.iter().sum::<usize>()
        )));
    }
    let mut chosen: HashSet<&str> = HashSet::new();
    for (stream, (ids, &take)) in by_class.values().zip(&alloc).enumerate() {
        let mut ids = ids.clone();
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        ids.shuffle(&mut rng);
        chosen.extend(ids.into_iter().take(take));
    }
    manifest.restrict(&chosen, taxonomy)
}

/// One participant's ranked labels per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub annotator_id: String,
    pub provenance: String,
    pub records: BTreeMap<String, Vec<String>>,
}

impl AnnotationSet {
    pub fn new(annotator_id: impl Into<String>) -> Self {
        AnnotationSet {
            annotator_id: annotator_id.into(),
            provenance: String::new(),
            records: BTreeMap::new(),
        }
    }

    /// Adds one record; a repeated sample id is an error.
    pub fn insert(&mut self, sample_id: impl Into<String>, ranked: Vec<String>) -> Result<()> {
        let id = sample_id.into();
        if ranked.is_empty() {
            return Err(Error::Annotation(format!("{id}: no label given")));
        }
        if self.records.contains_key(&id) {
            return Err(Error::Annotation(format!(
                "{}: duplicate annotation for {id}",
                self.annotator_id
            )));
        }
        self.records.insert(id, ranked);
        Ok(())
    }

    /// Model predictions as a participant, keeping at most three ranks.
    pub fn from_predictions(id: impl Into<String>, records: &[PredictionRecord]) -> Result<Self> {
        let mut set = AnnotationSet::new(id);
        set.provenance = "model predictions".into();
        for r in records {
            set.insert(r.sample_id.clone(), r.ranked_classes.iter().take(3).cloned().collect())?;
        }
        Ok(set)
    }

    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        for ranked in self.records.values() {
            if let Some(bad) = ranked.iter().find(|c| !taxonomy.is_l3(c)) {
                return Err(Error::UnknownClass(bad.clone()));
            }
        }
        Ok(())
    }

    /// Parses the annotation format: `# annotator: <id>` (required) and
    /// optional `# provenance: <text>` header lines, a
    /// `sample_id,rank1,rank2,rank3` header row, then one row per sample
    /// with one to three ranked codes.
    pub fn parse(text: &str) -> Result<Self> {
        let mut annotator = None;
        let mut provenance = String::new();
        let mut body = String::new();
        for line in text.lines() {
            if let Some(comment) = line.strip_prefix('#') {
                if let Some((k, v)) = comment.split_once(':') {
                    match k.trim() {
                        "annotator" => annotator = Some(v.trim().to_string()),
                        "provenance" => provenance = v.trim().to_string(),
                        _ => {}
                    }
                }
            } else if !line.trim().is_empty() {
                body.push_str(line);
                body.push('\n');
            }
        }
        let annotator = annotator
            .filter(|a| !a.is_empty())
            .ok_or_else(|| Error::Annotation("missing `# annotator:` header".into()))?;
        let mut set = AnnotationSet::new(annotator);
        set.provenance = provenance;
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(body.as_bytes());
        let header = reader.headers()?.clone();
        if header.get(0) != Some("sample_id") {
            return Err(Error::Annotation("header row must start with `sample_id`".into()));
        }
        for row in reader.records() {
            let row = row?;
            let id = row.get(0).unwrap_or_default();
            let ranked: Vec<String> = row
                .iter()
                .skip(1)
                .filter(|c| !c.is_empty())
                .map(str::to_string)
                .collect();
            if ranked.len() > 3 {
                return Err(Error::Annotation(format!("{id}: more than three ranks")));
            }
            set.insert(id, ranked)?;
        }
        Ok(set)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        AnnotationSet::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# annotator: {}\n", self.annotator_id);
        if !self.provenance.is_empty() {
            out.push_str(&format!("# provenance: {}\n", self.provenance));
        }
        out.push_str("sample_id,rank1,rank2,rank3\n");
        for (id, ranked) in &self.records {
            out.push_str(id);
            for c in ranked {
                out.push(',');
                out.push_str(c);
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    fn sample_ids(&self) -> BTreeSet<&str> {
        self.records.keys().map(String::as_str).collect()
    }

    /// Records aligned with `truth`, after checking exact coverage.
    pub fn to_records(&self, truth: &DatasetManifest) -> Result<Vec<PredictionRecord>> {
        let expected: BTreeSet<&str> = truth.records().iter().map(|r| r.sample_id.as_str()).collect();
        let have = self.sample_ids();
        if let Some(missing) = expected.difference(&have).next() {
            let n = expected.difference(&have).count();
            return Err(Error::Annotation(format!(
                "{}: {n} subset record(s) unannotated, first {missing}",
                self.annotator_id
            )));
        }
        if let Some(extra) = have.difference(&expected).next() {
            return Err(Error::Annotation(format!(
                "{}: {extra} is not in the review subset",
                self.annotator_id
            )));
        }
        Ok(truth
            .records()
            .iter()
            .map(|r| PredictionRecord {
                sample_id: r.sample_id.clone(),
                true_class: r.l3_label.clone(),
                ranked_classes: self.records[&r.sample_id].clone(),
                scores: None,
            })
            .collect())
    }
}

/// Metrics for one participant over the review subset. Top-3 is reported
/// only when every record carries a full ranking.
pub fn score_participant(
    participant: &AnnotationSet,
    truth: &DatasetManifest,
    taxonomy: &Taxonomy,
) -> Result<MetricsReport> {
    participant.validate(taxonomy)?;
    metrics::evaluate(&participant.to_records(truth)?, taxonomy.l3_order())
}

pub fn per_participant_cm(
    participant: &AnnotationSet,
    truth: &DatasetManifest,
    taxonomy: &Taxonomy,
) -> Result<ConfusionMatrix> {
    participant.validate(taxonomy)?;
    metrics::confusion_matrix(
        &participant.to_records(truth)?,
        taxonomy.l3_order(),
        Normalization::PerTrueClass,
    )
}

/// Pairwise top-1 MCC between participants.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementMatrix {
    pub participants: Vec<String>,
    pub values: Array2<f64>,
}

impl AgreementMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("participant");
        for p in &self.participants {
            out.push(',');
            out.push_str(p);
        }
        out.push('\n');
        for (p, row) in self.participants.iter().zip(self.values.rows()) {
            out.push_str(p);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn agreement_matrix(participants: &[AnnotationSet]) -> Result<AgreementMatrix> {
    let Some(first) = participants.first() else {
        return Err(Error::InvalidParameter("no participants".into()));
    };
    let ids = first.sample_ids();
    for p in &participants[1..] {
        if p.sample_ids() != ids {
            return Err(Error::Annotation(format!(
                "{} and {} cover different samples",
                first.annotator_id, p.annotator_id
            )));
        }
    }
    let k = participants.len();
    let mut values = Array2::<f64>::eye(k);
    for i in 0..k {
        for j in i + 1..k {
            let pairs = ids.iter().map(|id| {
                (
                    participants[i].records[*id][0].as_str(),
                    participants[j].records[*id][0].as_str(),
                )
            });
            let v = metrics::mcc_from_labels(pairs);
            values[[i, j]] = v;
            values[[j, i]] = v;
        }
    }
    Ok(AgreementMatrix {
        participants: participants.iter().map(|p| p.annotator_id.clone()).collect(),
        values,
    })
}
