//! Classification metrics: top-k accuracy, multiclass MCC, per-class
//! precision/recall/F1, support-weighted F1 and confusion matrices.
//!
//! All metrics that need a single prediction per sample use the first
//! entry of `ranked_classes` (the top-1 prediction).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ranked prediction for one sample, from a model or an annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub true_class: String,
    /// Best first.
    pub ranked_classes: Vec<String>,
    /// Optional scores parallel to `ranked_classes`.
    pub scores: Option<Vec<f64>>,
}

impl PredictionRecord {
    /// Builds a record from a full score vector over `class_order`. Ties are
    /// broken by position in `class_order`.
    pub fn from_scores(
        sample_id: impl Into<String>,
        true_class: impl Into<String>,
        scores: &[f64],
        class_order: &[String],
    ) -> Self {
        let (ranked_classes, sorted) = rank_scores(scores, class_order);
        PredictionRecord {
            sample_id: sample_id.into(),
            true_class: true_class.into(),
            ranked_classes,
            scores: Some(sorted),
        }
    }

    pub fn top1(&self) -> &str {
        &self.ranked_classes[0]
    }

    fn check(&self) -> Result<()> {
        if self.ranked_classes.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "record `{}` has no ranked classes",
                self.sample_id
            )));
        }
        let distinct: HashSet<&String> = self.ranked_classes.iter().collect();
        if distinct.len() != self.ranked_classes.len() {
            return Err(Error::InvalidParameter(format!(
                "record `{}` ranks a class twice",
                self.sample_id
            )));
        }
        if let Some(s) = &self.scores {
            if s.len() != self.ranked_classes.len() {
                return Err(Error::InvalidParameter(format!(
                    "record `{}` has {} scores for {} ranked classes",
                    self.sample_id,
                    s.len(),
                    self.ranked_classes.len()
                )));
            }
        }
        Ok(())
    }
}

/// Sorts classes by descending score; equal scores keep `class_order` order.
pub fn rank_scores(scores: &[f64], class_order: &[String]) -> (Vec<String>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    (
        idx.iter().map(|&i| class_order[i].clone()).collect(),
        idx.iter().map(|&i| scores[i]).collect(),
    )
}

fn check_records(records: &[PredictionRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidParameter("no prediction records".into()));
    }
    records.iter().try_for_each(PredictionRecord::check)
}

/// Fraction of records whose true class is among the first `k` ranked
/// classes. Callers evaluating over fewer than `k` classes should pass
/// `k = min(k, |C|)`.
pub fn topk_accuracy(records: &[PredictionRecord], k: usize) -> Result<f64> {
    check_records(records)?;
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if let Some(r) = records.iter().find(|r| r.ranked_classes.len() < k) {
        return Err(Error::InvalidParameter(format!(
            "record `{}` ranks {} classes, top-{k} needs {k}",
            r.sample_id,
            r.ranked_classes.len()
        )));
    }
    let hits = records
        .iter()
        .filter(|r| r.ranked_classes[..k].contains(&r.true_class))
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// Multiclass Matthews correlation from agreement count, per-class truth
/// counts `t_k` and prediction counts `p_k`. A zero denominator gives 0.
pub fn mcc(records: &[PredictionRecord]) -> Result<f64> {
    check_records(records)?;
    Ok(mcc_from_labels(
        records.iter().map(|r| (r.true_class.as_str(), r.top1())),
    ))
}

pub(crate) fn mcc_from_labels<'a>(pairs: impl Iterator<Item = (&'a str, &'a str)>) -> f64 {
    // integer contingency sums keep the result exact and order-independent
    let mut truth: BTreeMap<&str, u128> = BTreeMap::new();
    let mut pred: BTreeMap<&str, u128> = BTreeMap::new();
    let mut correct: u128 = 0;
    let mut s: u128 = 0;
    for (t, p) in pairs {
        *truth.entry(t).or_default() += 1;
        *pred.entry(p).or_default() += 1;
        if t == p {
            correct += 1;
        }
        s += 1;
    }
    let tp: u128 = truth.iter().map(|(k, t)| t * pred.get(k).copied().unwrap_or(0)).sum();
    let p2: u128 = pred.values().map(|p| p * p).sum();
    let t2: u128 = truth.values().map(|t| t * t).sum();
    let denom = ((s * s - p2) as f64 * (s * s - t2) as f64).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    ((correct * s) as i128 - tp as i128) as f64 / denom
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrf {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassPrf {
    pub fn has_support(&self) -> bool {
        self.support > 0
    }
}

/// One-vs-rest precision, recall and F1 for every class in `class_order`.
/// Zero predicted positives gives precision 0; zero support gives recall 0.
pub fn per_class_prf(records: &[PredictionRecord], class_order: &[String]) -> Result<Vec<ClassPrf>> {
    check_records(records)?;
    let index = class_index(class_order);
    let n = class_order.len();
    let (mut tp, mut fp, mut fn_) = (vec![0u64; n], vec![0u64; n], vec![0u64; n]);
    for r in records {
        let t = lookup(&index, &r.true_class)?;
        let p = lookup(&index, r.top1())?;
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    Ok((0..n)
        .map(|k| {
            let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
            ClassPrf {
                class: class_order[k].clone(),
                precision: ratio(tp[k], tp[k] + fp[k]),
                recall: ratio(tp[k], tp[k] + fn_[k]),
                f1: ratio(2 * tp[k], 2 * tp[k] + fp[k] + fn_[k]),
                support: tp[k] + fn_[k],
                tp: tp[k],
                fp: fp[k],
                fn_: fn_[k],
            }
        })
        .collect())
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(table: &[ClassPrf]) -> Result<f64> {
    let total: u64 = table.iter().map(|c| c.support).sum();
    if total == 0 {
        return Err(Error::Degenerate("total support is zero".into()));
    }
    Ok(table.iter().map(|c| c.support as f64 * c.f1).sum::<f64>() / total as f64)
}

fn class_index(class_order: &[String]) -> HashMap<&str, usize> {
    class_order.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect()
}

fn lookup(index: &HashMap<&str, usize>, code: &str) -> Result<usize> {
    index
        .get(code)
        .copied()
        .ok_or_else(|| Error::UnknownClass(code.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    PerTrueClass,
}

/// Counts indexed `[true][predicted]`; normalization is applied on view.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub class_order: Vec<String>,
    pub counts: Array2<u64>,
    pub normalization: Normalization,
}

impl ConfusionMatrix {
    pub fn support(&self, true_idx: usize) -> u64 {
        self.counts.row(true_idx).sum()
    }

    /// The matrix under its normalization. Rows of unsupported classes stay
    /// zero when normalized per true class.
    pub fn values(&self) -> Array2<f64> {
        let mut v = self.counts.mapv(|c| c as f64);
        if self.normalization == Normalization::PerTrueClass {
            for mut row in v.rows_mut() {
                let total: f64 = row.sum();
                if total > 0.0 {
                    row.mapv_inplace(|x| x / total);
                }
            }
        }
        v
    }

    pub fn with_normalization(&self, normalization: Normalization) -> Self {
        ConfusionMatrix {
            normalization,
            ..self.clone()
        }
    }

    pub fn to_matrix(&self) -> LabelledMatrix {
        LabelledMatrix {
            class_order: self.class_order.clone(),
            values: self.values(),
        }
    }
}

pub fn confusion_matrix(
    records: &[PredictionRecord],
    class_order: &[String],
    normalization: Normalization,
) -> Result<ConfusionMatrix> {
    check_records(records)?;
    let index = class_index(class_order);
    let n = class_order.len();
    let mut counts = Array2::<u64>::zeros((n, n));
    for r in records {
        let t = lookup(&index, &r.true_class)?;
        let p = lookup(&index, r.top1())?;
        counts[[t, p]] += 1;
    }
    Ok(ConfusionMatrix {
        class_order: class_order.to_vec(),
        counts,
        normalization,
    })
}

/// Square matrix with a class order on both axes: rows are true classes,
/// columns predicted classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledMatrix {
    pub class_order: Vec<String>,
    pub values: Array2<f64>,
}

/// Elementwise `a - b` of the two views. Positive entries mean `a` put more
/// mass on that cell.
pub fn delta_cm(a: &ConfusionMatrix, b: &ConfusionMatrix) -> Result<LabelledMatrix> {
    if a.class_order != b.class_order {
        return Err(Error::Shape("confusion matrices use different class orders".into()));
    }
    if a.normalization != b.normalization {
        return Err(Error::Shape("confusion matrices use different normalizations".into()));
    }
    Ok(LabelledMatrix {
        class_order: a.class_order.clone(),
        values: a.values() - b.values(),
    })
}

impl LabelledMatrix {
    /// Delimited grid. The corner cell labels the axes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for c in &self.class_order {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (i, c) in self.class_order.iter().enumerate() {
            out.push_str(c);
            for v in self.values.row(i) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::format("<matrix>", msg.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty matrix file"))?;
        let class_order: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let n = class_order.len();
        let mut values = Array2::<f64>::zeros((n, n));
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            let mut cells = line.split(',');
            let label = cells.next().unwrap_or_default();
            if i >= n || label != class_order[i] {
                return Err(bad("row labels do not match the header"));
            }
            let parsed: Vec<f64> = cells
                .map(|c| c.trim().parse::<f64>().map_err(|_| bad("non-numeric cell")))
                .collect::<Result<_>>()?;
            if parsed.len() != n {
                return Err(bad("ragged row"));
            }
            for (j, v) in parsed.into_iter().enumerate() {
                values[[i, j]] = v;
            }
            rows += 1;
        }
        if rows != n {
            return Err(bad("matrix is not square"));
        }
        Ok(LabelledMatrix { class_order, values })
    }

    /// Elementwise `self - other`; both must share one class order.
    pub fn minus(&self, other: &LabelledMatrix) -> Result<LabelledMatrix> {
        if self.class_order != other.class_order {
            return Err(Error::Shape("matrices use different class orders".into()));
        }
        Ok(LabelledMatrix {
            class_order: self.class_order.clone(),
            values: &self.values - &other.values,
        })
    }
}

/// Evaluation summary over one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub top1: f64,
    /// Absent when some record ranks fewer than three classes.
    pub top3: Option<f64>,
    pub mcc: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassPrf>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub fn evaluate(records: &[PredictionRecord], class_order: &[String]) -> Result<MetricsReport> {
    check_records(records)?;
    let k3 = 3.min(class_order.len());
    let top3 = if records.iter().all(|r| r.ranked_classes.len() >= k3) {
        Some(topk_accuracy(records, k3)?)
    } else {
        None
    };
    let per_class = per_class_prf(records, class_order)?;
    Ok(MetricsReport {
        n_samples: records.len(),
        top1: topk_accuracy(records, 1)?,
        top3,
        mcc: mcc(records)?,
        weighted_f1: weighted_f1(&per_class)?,
        per_class,
    })
}

/// Reads a predictions file: header `sample_id,true_class,ranked_classes,scores`
/// with `|`-separated lists; the scores column may be empty.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let ranked: Vec<String> = field(2)
            .split('|')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let scores = match field(3) {
            "" => None,
            s => Some(
                s.split('|')
                    .map(|v| {
                        v.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::format(path, format!("bad score `{v}`")))
                    })
                    .collect::<Result<Vec<f64>>>()?,
            ),
        };
        let record = PredictionRecord {
            sample_id: field(0).to_string(),
            true_class: field(1).to_string(),
            ranked_classes: ranked,
            scores,
        };
        record.check().map_err(|e| Error::format(path, e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("sample_id,true_class,ranked_classes,scores\n");
    for r in records {
        let scores = r
            .scores
            .as_ref()
            .map(|s| s.iter().map(f64::to_string).collect::<Vec<_>>().join("|"))
            .unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.sample_id,
            r.true_class,
            r.ranked_classes.join("|"),
            scores
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn top1_records(truth: &[usize], pred: &[usize]) -> Vec<PredictionRecord> {
        truth
            .iter()
            .zip(pred)
            .enumerate()
            .map(|(i, (&t, &p))| PredictionRecord {
                sample_id: format!("s{i}"),
                true_class: format!("c{t}"),
                ranked_classes: vec![format!("c{p}")],
                scores: None,
            })
            .collect()
    }

    /// Records whose truth sits at the given 1-based rank among 5 classes.
    fn positioned(positions: &[usize]) -> Vec<PredictionRecord> {
        positions
            .iter()
            .enumerate()
            .map(|(i, &pos)| {
                let mut ranked: Vec<String> = (1..5).map(|c| format!("c{c}")).collect();
                ranked.insert(pos - 1, "c0".into());
                PredictionRecord {
                    sample_id: format!("s{i}"),
                    true_class: "c0".into(),
                    ranked_classes: ranked,
                    scores: None,
                }
            })
            .collect()
    }

    #[test]
    fn topk_examples() {
        let all_first = positioned(&[1, 1, 1]);
        for k in 1..=5 {
            assert_eq!(topk_accuracy(&all_first, k).unwrap(), 1.0);
        }
        let second = positioned(&[2, 2]);
        assert_eq!(topk_accuracy(&second, 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&second, 3).unwrap(), 1.0);
        let mixed = positioned(&[1, 1, 2, 3, 4, 1]);
        assert_eq!(topk_accuracy(&mixed, 1).unwrap(), 3.0 / 6.0);
        assert_eq!(topk_accuracy(&mixed, 3).unwrap(), 5.0 / 6.0);
        assert!(topk_accuracy(&[], 1).is_err());
        assert!(topk_accuracy(&mixed, 0).is_err());
        assert!(topk_accuracy(&mixed, 6).is_err());
    }

    #[test]
    fn derived_six_record_fixture() {
        let recs = top1_records(&[0, 0, 1, 1, 2, 2], &[0, 1, 1, 1, 2, 0]);
        let m = mcc(&recs).unwrap();
        assert!((m - 12.0 / (22f64.sqrt() * 24f64.sqrt())).abs() < 1e-12);
        assert!((m - 0.5222).abs() < 1e-4);
        let table = per_class_prf(&recs, &classes(3)).unwrap();
        let expect = [(0.5, 0.5, 0.5), (2.0 / 3.0, 1.0, 0.8), (1.0, 0.5, 2.0 / 3.0)];
        for (row, (p, r, f)) in table.iter().zip(expect) {
            assert!((row.precision - p).abs() < 1e-12);
            assert!((row.recall - r).abs() < 1e-12);
            assert!((row.f1 - f).abs() < 1e-12);
            assert_eq!(row.support, 2);
        }
        let wf1 = weighted_f1(&table).unwrap();
        assert!((wf1 - (0.5 + 0.8 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
        assert!((wf1 - 0.6556).abs() < 1e-4);
    }

    #[test]
    fn mcc_edge_cases() {
        let perfect = top1_records(&[0, 1, 2, 1], &[0, 1, 2, 1]);
        assert_eq!(mcc(&perfect).unwrap(), 1.0);
        let constant = top1_records(&[0, 1, 2, 1], &[1, 1, 1, 1]);
        assert_eq!(mcc(&constant).unwrap(), 0.0);
    }

    #[test]
    fn never_predicted_class_has_zero_precision() {
        let recs = top1_records(&[0, 1], &[1, 1]);
        let table = per_class_prf(&recs, &classes(3)).unwrap();
        assert_eq!(table[0].precision, 0.0);
        assert_eq!(table[0].recall, 0.0);
        assert!(!table[2].has_support());
    }

    #[test]
    fn weighted_f1_needs_support() {
        assert!(weighted_f1(&[]).is_err());
    }

    #[test]
    fn normalized_confusion_matrix() {
        let recs = top1_records(&[0, 0, 1, 1, 2, 2], &[0, 1, 1, 1, 2, 0]);
        let cm = confusion_matrix(&recs, &classes(4), Normalization::PerTrueClass).unwrap();
        let v = cm.values();
        for t in 0..3 {
            assert!((v.row(t).sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(v.row(3).sum(), 0.0);
        assert_eq!(v[[0, 1]], 0.5);
        let perfect = top1_records(&[0, 1, 2], &[0, 1, 2]);
        let id = confusion_matrix(&perfect, &classes(3), Normalization::PerTrueClass).unwrap();
        assert_eq!(id.values(), Array2::<f64>::eye(3));
    }

    #[test]
    fn delta_antisymmetric() {
        let a = confusion_matrix(
            &top1_records(&[0, 1, 1], &[0, 1, 0]),
            &classes(2),
            Normalization::PerTrueClass,
        )
        .unwrap();
        let b = confusion_matrix(
            &top1_records(&[0, 1, 1], &[1, 1, 1]),
            &classes(2),
            Normalization::PerTrueClass,
        )
        .unwrap();
        let d1 = delta_cm(&a, &b).unwrap();
        let d2 = delta_cm(&b, &a).unwrap();
        assert_eq!(d1.values, -d2.values);
        assert_eq!(delta_cm(&a, &a).unwrap().values, Array2::<f64>::zeros((2, 2)));
        assert!(delta_cm(&a, &a.with_normalization(Normalization::None)).is_err());
    }

    #[test]
    fn ranking_ties_follow_class_order() {
        let order = classes(3);
        let r = PredictionRecord::from_scores("x", "c0", &[0.2, 0.4, 0.4], &order);
        assert_eq!(r.ranked_classes, vec!["c1", "c2", "c0"]);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let recs = top1_records(&[0, 0, 1], &[0, 1, 1]);
        let cm = confusion_matrix(&recs, &classes(2), Normalization::PerTrueClass).unwrap();
        let m = cm.to_matrix();
        assert_eq!(LabelledMatrix::from_csv(&m.to_csv()).unwrap(), m);
    }

    #[test]
    fn predictions_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let order = classes(3);
        let recs = vec![
            PredictionRecord::from_scores("a", "c1", &[0.1, 0.7, 0.2], &order),
            top1_records(&[2], &[0]).remove(0),
        ];
        write_predictions(&path, &recs).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), recs);
    }

    #[test]
    fn rejects_duplicate_ranked_classes() {
        let r = PredictionRecord {
            sample_id: "a".into(),
            true_class: "c0".into(),
            ranked_classes: vec!["c0".into(), "c0".into()],
            scores: None,
        };
        assert!(mcc(&[r]).is_err());
    }
}
