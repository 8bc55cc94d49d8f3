use std::collections::BTreeMap;

use habclass_core::dataset::{stratified_split, DatasetManifest, SampleRecord, Split, SplitFractions};
use habclass_core::embedding::{calinski_harabasz, davies_bouldin, EmbeddingSet};
use habclass_core::expert::{agreement_matrix, draw_expert_subset, score_participant, AnnotationSet};
use habclass_core::explain::{cam_grid, upsample_bilinear, FeatureGradient};
use habclass_core::metrics::{evaluate, PredictionRecord};
use habclass_core::taxonomy::Taxonomy;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn centroids(x: &Array2<f64>, labels: &[usize]) -> BTreeMap<usize, (Vec<f64>, usize)> {
    let mut out: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, &l) in x.rows().into_iter().zip(labels) {
        let e = out.entry(l).or_insert_with(|| (vec![0.0; x.ncols()], 0));
        for (a, v) in e.0.iter_mut().zip(row) {
            *a += v;
        }
        e.1 += 1;
    }
    for (c, n) in out.values_mut() {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    out
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn ch_oracle(x: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = x.nrows();
    let cents = centroids(x, labels);
    let k = cents.len();
    let overall: Vec<f64> = (0..x.ncols()).map(|j| x.column(j).sum() / n as f64).collect();
    let b: f64 = cents.values().map(|(c, m)| *m as f64 * dist(c, &overall).powi(2)).sum();
    let w: f64 = x
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(r, l)| dist(&r.to_vec(), &cents[l].0).powi(2))
        .sum();
    (b / (k - 1) as f64) / (w / (n - k) as f64)
}

fn db_oracle(x: &Array2<f64>, labels: &[usize]) -> f64 {
    let cents = centroids(x, labels);
    let mut spread: BTreeMap<usize, f64> = BTreeMap::new();
    for (r, l) in x.rows().into_iter().zip(labels) {
        *spread.entry(*l).or_default() += dist(&r.to_vec(), &cents[l].0) / cents[l].1 as f64;
    }
    let keys: Vec<usize> = cents.keys().copied().collect();
    let worst: f64 = keys
        .iter()
        .map(|i| {
            keys.iter()
                .filter(|j| *j != i)
                .map(|j| (spread[i] + spread[j]) / dist(&cents[i].0, &cents[j].0))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    worst / keys.len() as f64
}

fn set(x: Array2<f64>, labels: &[usize]) -> EmbeddingSet {
    EmbeddingSet::from_points(x, labels.iter().map(|l| format!("g{l}")).collect()).unwrap()
}

fn labelled_points() -> impl Strategy<Value = (Array2<f64>, Vec<usize>)> {
    (2usize..6, 1usize..9).prop_flat_map(|(k, d)| {
        ((k + 1)..=50usize).prop_flat_map(move |n| {
            (
                prop::collection::vec(-5.0f64..5.0, n * d)
                    .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap()),
                // every label appears at least once
                prop::collection::vec(0..k, n - k).prop_map(move |mut l| {
                    l.extend(0..k);
                    l
                }),
            )
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cluster_indices_match_oracles_and_ignore_order((x, labels) in labelled_points(), seed in any::<u64>()) {
        let s = set(x.clone(), &labels);
        let ch = calinski_harabasz(&s).unwrap();
        let db = davies_bouldin(&s).unwrap();
        prop_assert!((ch - ch_oracle(&x, &labels)).abs() <= 1e-9 * ch.abs().max(1.0));
        prop_assert!((db - db_oracle(&x, &labels)).abs() <= 1e-9 * db.abs().max(1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..x.nrows()).collect();
        perm.shuffle(&mut rng);
        let px = Array2::from_shape_fn(x.dim(), |(i, j)| x[[perm[i], j]]);
        let k = labels.iter().max().unwrap() + 1;
        let mut relabel: Vec<usize> = (0..k).collect();
        relabel.shuffle(&mut rng);
        let pl: Vec<usize> = perm.iter().map(|&i| relabel[labels[i]]).collect();
        let ps = set(px, &pl);
        prop_assert!((calinski_harabasz(&ps).unwrap() - ch).abs() <= 1e-9 * ch.abs().max(1.0));
        prop_assert!((davies_bouldin(&ps).unwrap() - db).abs() <= 1e-9 * db.abs().max(1.0));
    }

    #[test]
    fn cam_is_nonnegative_and_normalized(
        features in prop::collection::vec(-2.0f64..2.0, 16 * 3),
        gradient in prop::collection::vec(-2.0f64..2.0, 16 * 3),
        lambda in 0.01f64..100.0,
    ) {
        let fg = FeatureGradient {
            features: Array2::from_shape_vec((16, 3), features).unwrap(),
            gradient: Array2::from_shape_vec((16, 3), gradient).unwrap(),
            grid: (4, 4),
        };
        let cam = cam_grid(&fg).unwrap();
        prop_assert!(cam.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let max = cam.fold(0.0f64, |m, &v| m.max(v));
        prop_assert!(max == 0.0 || (max - 1.0).abs() < 1e-12);
        let scaled = FeatureGradient { gradient: &fg.gradient * lambda, ..fg.clone() };
        let cam2 = cam_grid(&scaled).unwrap();
        prop_assert!((&cam - &cam2).iter().all(|d| d.abs() <= 1e-6));
        let up = upsample_bilinear(&cam, 32, 32);
        prop_assert!(up.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
    }
}

#[test]
fn one_dimensional_fixture() {
    let x = array![[0.0], [2.0], [10.0], [12.0]];
    let labels = [0, 0, 1, 1];
    assert!((calinski_harabasz(&set(x.clone(), &labels)).unwrap() - 50.0).abs() < 1e-9);
    assert!((davies_bouldin(&set(x, &labels)).unwrap() - 0.2).abs() < 1e-9);
}

#[test]
fn ch_grows_with_separation() {
    let at = |gap: f64| calinski_harabasz(&set(array![[0.0], [2.0], [gap], [gap + 2.0]], &[0, 0, 1, 1])).unwrap();
    assert!(at(10.0) < at(20.0));
}

#[test]
fn indicator_patch_gives_the_patch() {
    let mut features = Array2::zeros((9, 2));
    for cell in [4, 5] {
        features[[cell, 0]] = 1.0;
    }
    features.column_mut(1).fill(0.7);
    // linear score w·mean(features) with w = (2, 0): gradient is w / 9 everywhere
    let gradient = Array2::from_shape_fn((9, 2), |(_, c)| if c == 0 { 2.0 / 9.0 } else { 0.0 });
    let cam = cam_grid(&FeatureGradient {
        features,
        gradient,
        grid: (3, 3),
    })
    .unwrap();
    assert_eq!(cam, array![[0.0, 0.0, 0.0], [0.0, 1.0, 1.0], [0.0, 0.0, 0.0]]);
}

fn manifest(counts: &[usize], tax: &Taxonomy) -> DatasetManifest {
    let records = counts
        .iter()
        .zip(tax.l3_order())
        .flat_map(|(&n, code)| {
            (0..n).map(move |i| SampleRecord {
                sample_id: format!("{code}-{i:03}"),
                image_ref: format!("{code}/{i}.png"),
                l3_label: code.clone(),
                source_tag: String::new(),
            })
        })
        .collect();
    DatasetManifest::new(records, tax).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn expert_subset_is_stratified_and_reproducible(
        counts in prop::collection::vec(4usize..80, 2..8),
        fraction in 0.05f64..1.0,
        seed in any::<u64>(),
    ) {
        let tax = Taxonomy::default();
        let m = manifest(&counts, &tax);
        let split = stratified_split(&m, SplitFractions::default(), 4, 1).unwrap();
        let Ok(subset) = draw_expert_subset(&m, &split, fraction, seed, &tax) else {
            return Ok(());
        };
        let mut test_per_class: BTreeMap<&str, usize> = BTreeMap::new();
        for r in m.records() {
            if split.get(&r.sample_id) == Some(Split::Test) {
                *test_per_class.entry(&r.l3_label).or_default() += 1;
            }
        }
        let mut drawn: BTreeMap<&str, usize> = BTreeMap::new();
        for r in subset.records() {
            prop_assert_eq!(split.get(&r.sample_id), Some(Split::Test));
            *drawn.entry(&r.l3_label).or_default() += 1;
        }
        for (class, n) in &test_per_class {
            let got = *drawn.get(class).unwrap_or(&0) as f64;
            prop_assert!((got - fraction * *n as f64).abs() <= 1.0 + 1e-9, "{class}: {got} of {n}");
        }
        let again = draw_expert_subset(&m, &split, fraction, seed, &tax).unwrap();
        prop_assert_eq!(again, subset);
    }
}

#[test]
fn scoring_delegates_to_metrics_exactly() {
    let tax = Taxonomy::default();
    let truth = manifest(&[5, 5, 5], &tax);
    let order = tax.l3_order().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let preds: Vec<PredictionRecord> = truth
        .records()
        .iter()
        .map(|r| {
            let scores: Vec<f64> = (0..order.len()).map(|_| rng.random::<f64>()).collect();
            PredictionRecord::from_scores(r.sample_id.clone(), r.l3_label.clone(), &scores, &order)
        })
        .collect();
    let participant = AnnotationSet::from_predictions("model", &preds).unwrap();
    let via_bench = score_participant(&participant, &truth, &tax).unwrap();
    let truncated: Vec<PredictionRecord> = preds
        .iter()
        .map(|p| PredictionRecord {
            ranked_classes: p.ranked_classes[..3].to_vec(),
            scores: None,
            ..p.clone()
        })
        .collect();
    assert_eq!(via_bench, evaluate(&truncated, &order).unwrap());
}

#[test]
fn agreement_is_symmetric_with_unit_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let codes = ["bog", "fen_marsh_swamp", "acid_grassland", "urban"];
    let sets: Vec<AnnotationSet> = (0..4)
        .map(|p| {
            let mut s = AnnotationSet::new(format!("p{p}"));
            for i in 0..40 {
                s.insert(format!("s{i}"), vec![codes[rng.random_range(0..4)].to_string()])
                    .unwrap();
            }
            s
        })
        .collect();
    let m = agreement_matrix(&sets).unwrap();
    for i in 0..4 {
        assert_eq!(m.values[[i, i]], 1.0);
        for j in 0..4 {
            assert!((m.values[[i, j]] - m.values[[j, i]]).abs() <= 1e-12);
        }
    }
}
