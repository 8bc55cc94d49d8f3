use habclass_core::metrics::{self, evaluate, mcc, per_class_prf, topk_accuracy, PredictionRecord};
use habclass_core::taxonomy::Taxonomy;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn classes(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i:02}")).collect()
}

/// Records with a full random ranking each; `agree` biases rank 1 towards
/// the truth.
fn random_records(rng: &mut ChaCha8Rng, order: &[String], n: usize, agree: f64) -> Vec<PredictionRecord> {
    (0..n)
        .map(|i| {
            let truth = order[rng.random_range(0..order.len())].clone();
            let mut ranked = order.to_vec();
            ranked.shuffle(rng);
            if rng.random::<f64>() < agree {
                let pos = ranked.iter().position(|c| *c == truth).unwrap();
                ranked.swap(0, pos);
            }
            PredictionRecord {
                sample_id: format!("s{i}"),
                true_class: truth,
                ranked_classes: ranked,
                scores: None,
            }
        })
        .collect()
}

/// Multiclass MCC written out over an explicit contingency table.
fn oracle_mcc(records: &[PredictionRecord], order: &[String]) -> f64 {
    let k = order.len();
    let idx = |c: &str| order.iter().position(|o| o == c).unwrap();
    let mut table = vec![vec![0f64; k]; k];
    for r in records {
        table[idx(&r.true_class)][idx(r.top1())] += 1.0;
    }
    let s: f64 = table.iter().flatten().sum();
    let c: f64 = (0..k).map(|i| table[i][i]).sum();
    let t: Vec<f64> = (0..k).map(|i| table[i].iter().sum()).collect();
    let p: Vec<f64> = (0..k).map(|j| (0..k).map(|i| table[i][j]).sum()).collect();
    let tp: f64 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
    let den =
        (s * s - p.iter().map(|x| x * x).sum::<f64>()).sqrt() * (s * s - t.iter().map(|x| x * x).sum::<f64>()).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (c * s - tp) / den
    }
}

fn labels_to_records(truth: &[usize], pred: &[usize], order: &[String]) -> Vec<PredictionRecord> {
    truth
        .iter()
        .zip(pred)
        .enumerate()
        .map(|(i, (&t, &p))| {
            let mut ranked = vec![order[p].clone()];
            ranked.extend(order.iter().filter(|c| **c != order[p]).cloned());
            PredictionRecord {
                sample_id: format!("s{i}"),
                true_class: order[t].clone(),
                ranked_classes: ranked,
                scores: None,
            }
        })
        .collect()
}

fn label_pairs(k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..60).prop_flat_map(move |n| (prop::collection::vec(0..k, n), prop::collection::vec(0..k, n)))
}

proptest! {
    #[test]
    fn topk_is_monotone_and_full_ranking_reaches_one(seed in any::<u64>(), n in 1usize..80) {
        let order = classes(6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = random_records(&mut rng, &order, n, 0.3);
        let accs: Vec<f64> = (1..=6).map(|k| topk_accuracy(&records, k).unwrap()).collect();
        prop_assert!(accs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(accs[5], 1.0);
    }

    #[test]
    fn mcc_matches_contingency_oracle((t, p) in label_pairs(5)) {
        let order = classes(5);
        let records = labels_to_records(&t, &p, &order);
        prop_assert!((mcc(&records).unwrap() - oracle_mcc(&records, &order)).abs() < 1e-9);
    }

    #[test]
    fn mcc_is_symmetric_in_truth_and_prediction((t, p) in label_pairs(4)) {
        let order = classes(4);
        let forward = mcc(&labels_to_records(&t, &p, &order)).unwrap();
        let swapped = mcc(&labels_to_records(&p, &t, &order)).unwrap();
        prop_assert!((forward - swapped).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_give_unit_mcc(t in prop::collection::vec(0usize..4, 1..50)) {
        let order = classes(4);
        let records = labels_to_records(&t, &t, &order);
        let distinct = t.iter().collect::<std::collections::HashSet<_>>().len();
        let expected = if distinct > 1 { 1.0 } else { 0.0 };
        prop_assert_eq!(mcc(&records).unwrap(), expected);
    }

    #[test]
    fn true_positives_sum_to_top1((t, p) in label_pairs(6)) {
        let order = classes(6);
        let records = labels_to_records(&t, &p, &order);
        let table = per_class_prf(&records, &order).unwrap();
        let tp: u64 = table.iter().map(|c| c.tp).sum();
        let top1 = topk_accuracy(&records, 1).unwrap();
        prop_assert!((tp as f64 / records.len() as f64 - top1).abs() < 1e-12);
        let support: u64 = table.iter().map(|c| c.support).sum();
        prop_assert_eq!(support as usize, records.len());
    }

    #[test]
    fn aggregation_preserves_count_and_score_mass(seed in any::<u64>(), n in 1usize..40) {
        let tax = Taxonomy::default();
        let order = tax.l3_order().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<PredictionRecord> = (0..n)
            .map(|i| {
                let raw: Vec<f64> = (0..order.len()).map(|_| rng.random::<f64>()).collect();
                let total: f64 = raw.iter().sum();
                let scores: Vec<f64> = raw.iter().map(|v| v / total).collect();
                let truth = order[rng.random_range(0..order.len())].clone();
                PredictionRecord::from_scores(format!("s{i}"), truth, &scores, &order)
            })
            .collect();
        let l2 = tax.aggregate_to_l2(&records).unwrap();
        prop_assert_eq!(l2.len(), records.len());
        for (a, b) in records.iter().zip(&l2) {
            let sa: f64 = a.scores.as_ref().unwrap().iter().sum();
            let sb: f64 = b.scores.as_ref().unwrap().iter().sum();
            prop_assert!((sa - sb).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_only_aggregation_never_lowers_top1(seed in any::<u64>(), n in 1usize..40) {
        let tax = Taxonomy::default();
        let order = tax.l3_order().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = random_records(&mut rng, &order, n, 0.4);
        let l2 = tax.aggregate_to_l2(&records).unwrap();
        prop_assert!(topk_accuracy(&l2, 1).unwrap() >= topk_accuracy(&records, 1).unwrap());
    }
}

#[test]
fn summed_scores_can_overturn_a_correct_fine_prediction() {
    let tax = Taxonomy::default();
    let order: Vec<String> = ["neutral_grassland", "improved_grassland", "bog"]
        .map(String::from)
        .to_vec();
    let record = PredictionRecord::from_scores("s", "bog", &[0.3, 0.3, 0.4], &order);
    assert_eq!(record.top1(), "bog");
    let l2 = tax.aggregate_to_l2(&[record]).unwrap();
    assert_eq!(l2[0].top1(), "grassland");
    assert_eq!(l2[0].scores.as_deref(), Some(&[0.6, 0.4][..]));
}

#[test]
fn parent_of_an_l2_code_errors() {
    let tax = Taxonomy::default();
    for code in tax.l2_order() {
        assert!(tax.parent_of(code).is_err(), "{code}");
    }
}

#[test]
fn independent_predictions_have_small_mean_mcc() {
    let order = classes(18);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let trials = 1000;
    let total: f64 = (0..trials)
        .map(|_| mcc(&random_records(&mut rng, &order, 100, 0.0)).unwrap().abs())
        .sum();
    assert!(total / (trials as f64) < 0.1, "mean |MCC| = {}", total / trials as f64);
}

#[test]
fn report_json_round_trips() {
    let order = classes(3);
    let records = labels_to_records(&[0, 0, 1, 1, 2, 2], &[0, 1, 1, 1, 2, 0], &order);
    let report = evaluate(&records, &order).unwrap();
    let back: metrics::MetricsReport = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(back, report);
}
