use habclass_core::model::{
    attention_backward, attention_weights, scaled_dot_attention, softmax, AttentionInput, Checkpoint, ClassifierHead,
    EncoderSpec, ImageEncoder, ProjectionHead, TinyEncoder,
};
use habclass_core::training::{cross_entropy_loss, supcon_loss, supcon_loss_and_grad};
use image::{Rgb, RgbImage};
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn qkv() -> impl Strategy<Value = (Array2<f64>, Array2<f64>, Array2<f64>)> {
    (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(n, d, dv)| (matrix(n, d), matrix(n, d), matrix(n, dv)))
}

fn unit_rows(m: Array2<f64>) -> Array2<f64> {
    let mut m = m;
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-6);
        row.mapv_inplace(|v| v / norm);
    }
    m
}

fn permute_rows(m: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(m.dim(), |(i, j)| m[[perm[i], j]])
}

fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt() + b.mapv(|v| v * v).sum().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at every entry of `x`.
fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let h = 1e-5;
    Array2::from_shape_fn(x.dim(), |idx| {
        let mut up = x.clone();
        up[idx] += h;
        let mut down = x.clone();
        down[idx] -= h;
        (f(&up) - f(&down)) / (2.0 * h)
    })
}

/// Per-anchor contrastive loss written directly from its definition.
fn supcon_oracle(z: &Array2<f64>, labels: &[usize], tau: f64) -> f64 {
    let n = z.nrows();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        let denom: f64 = (0..n)
            .filter(|&a| a != i)
            .map(|a| (z.row(i).dot(&z.row(a)) / tau).exp())
            .sum();
        let li: f64 = positives
            .iter()
            .map(|&p| -((z.row(i).dot(&z.row(p)) / tau).exp() / denom).ln())
            .sum();
        total += li / positives.len() as f64;
    }
    total / anchors as f64
}

proptest! {
    #[test]
    fn attention_rows_are_stochastic_and_outputs_convex((q, k, v) in qkv()) {
        let w = attention_weights(&q, &k).unwrap();
        for row in w.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
        let out = scaled_dot_attention(&AttentionInput::new(q, k, v.clone()).unwrap()).unwrap();
        for j in 0..v.ncols() {
            let col = v.column(j);
            let lo = col.fold(f64::INFINITY, |m, &x| m.min(x));
            let hi = col.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            for &o in out.column(j) {
                prop_assert!(o >= lo - 1e-9 && o <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant((q, k, v) in qkv(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = scaled_dot_attention(&AttentionInput::new(q.clone(), k.clone(), v.clone()).unwrap()).unwrap();
        let mut perm: Vec<usize> = (0..q.nrows()).collect();
        perm.shuffle(&mut rng);
        let pq = scaled_dot_attention(&AttentionInput::new(permute_rows(&q, &perm), k.clone(), v.clone()).unwrap()).unwrap();
        prop_assert!((&pq - &permute_rows(&base, &perm)).iter().all(|d| d.abs() < 1e-6));
        let pkv = scaled_dot_attention(
            &AttentionInput::new(q, permute_rows(&k, &perm), permute_rows(&v, &perm)).unwrap(),
        )
        .unwrap();
        prop_assert!((&pkv - &base).iter().all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn attention_gradient_matches_finite_differences(
        q in matrix(3, 4), k in matrix(3, 4), v in matrix(3, 4), d_out in matrix(3, 4),
    ) {
        let objective = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            let out = scaled_dot_attention(&AttentionInput::new(q.clone(), k.clone(), v.clone()).unwrap()).unwrap();
            (&out * &d_out).sum()
        };
        let w = attention_weights(&q, &k).unwrap();
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &w, &d_out);
        prop_assert!(rel_err(&dq, &numeric_grad(&q, |x| objective(x, &k, &v))) < 1e-4);
        prop_assert!(rel_err(&dk, &numeric_grad(&k, |x| objective(&q, x, &v))) < 1e-4);
        prop_assert!(rel_err(&dv, &numeric_grad(&v, |x| objective(&q, &k, x))) < 1e-4);
    }

    #[test]
    fn supcon_matches_oracle_and_is_permutation_symmetric(
        z in matrix(8, 5), labels in prop::collection::vec(0usize..3, 8), seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        prop_assume!((0..8).any(|i| (0..8).any(|j| i != j && labels[i] == labels[j])));
        let z = unit_rows(z);
        let loss = supcon_loss(&z, &labels, 0.1).unwrap();
        prop_assert!((loss - supcon_oracle(&z, &labels, 0.1)).abs() < 1e-9);
        prop_assert!(loss >= 0.0);
        let mut perm: Vec<usize> = (0..8).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let permuted = supcon_loss(&permute_rows(&z, &perm), &pl, 0.1).unwrap();
        prop_assert!((permuted - loss).abs() < 1e-9);
    }

    #[test]
    fn supcon_gradient_matches_finite_differences(z in matrix(6, 8), labels in prop::collection::vec(0usize..2, 6)) {
        prop_assume!((0..6).any(|i| (0..6).any(|j| i != j && labels[i] == labels[j])));
        let z = unit_rows(z);
        let (_, grad) = supcon_loss_and_grad(&z, &labels, 0.1).unwrap();
        let numeric = numeric_grad(&z, |x| supcon_loss_and_grad(x, &labels, 0.1).unwrap().0);
        prop_assert!(rel_err(&grad, &numeric) < 1e-4);
    }

    #[test]
    fn softmax_is_shift_invariant(scores in prop::collection::vec(-20.0f64..20.0, 1..10), c in -50.0f64..50.0) {
        let s = Array1::from(scores);
        let shifted = softmax(&(&s + c));
        prop_assert!((softmax(&s) - shifted).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn projection_is_unit_norm_and_scale_free(x in prop::collection::vec(-2.0f64..2.0, 6), lambda in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = ProjectionHead::random(6, 6, 4, &mut rng);
        let x = Array1::from(x);
        if let Ok(p) = head.project(&x) {
            prop_assert!((p.dot(&p).sqrt() - 1.0).abs() < 1e-6);
        }
        let ident = ProjectionHead::new(Array2::eye(6), Array1::zeros(6), Array2::eye(6), Array1::zeros(6)).unwrap();
        let pos = x.mapv(f64::abs) + 0.01;
        let a = ident.project(&pos).unwrap();
        let b = ident.project(&(&pos * lambda)).unwrap();
        prop_assert!((&a - &b).iter().all(|d| d.abs() < 1e-9));
        let norm = pos.dot(&pos).sqrt();
        prop_assert!((&a - &(&pos / norm)).iter().all(|d| d.abs() < 1e-9));
    }
}

#[test]
fn supcon_pinned_examples() {
    let z = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
    let loss = supcon_loss(&z, &[0, 0, 1, 1], 0.1).unwrap();
    // each anchor: -ln(e^10 / (e^10 + 2)) = ln(1 + 2e^-10)
    let oracle = (1.0 + 2.0 * (-10.0f64).exp()).ln();
    assert!((loss - oracle).abs() < 1e-12);
    assert!((loss - 9.08e-5).abs() < 1e-7);
    assert_eq!(supcon_loss(&array![[0.6, 0.8], [0.0, 1.0]], &[4, 4], 0.1).unwrap(), 0.0);
    assert!(supcon_loss(&array![[1.0, 0.0], [0.0, 1.0]], &[0, 1], 0.1).is_err());
}

#[test]
fn supcon_decreases_as_a_positive_pair_aligns() {
    let labels = [0, 0, 1, 1];
    let at = |angle: f64| {
        let z = array![[1.0, 0.0], [angle.cos(), angle.sin()], [0.0, 1.0], [0.0, 1.0]];
        supcon_loss(&z, &labels, 0.1).unwrap()
    };
    assert!(at(0.1) < at(0.4));
    assert!(at(0.4) < at(0.8));
}

#[test]
fn supcon_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let z = unit_rows(Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0)));
    let labels = [0, 0, 1, 1, 2, 2];
    let theta: f64 = 0.73;
    let rot = array![[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]];
    let a = supcon_loss(&z, &labels, 0.1).unwrap();
    let b = supcon_loss(&z.dot(&rot), &labels, 0.1).unwrap();
    assert!((a - b).abs() < 1e-9);
}

#[test]
fn cross_entropy_pinned_examples() {
    assert!((cross_entropy_loss(array![1.0, 0.0, -1.0].view(), 0).unwrap() - 0.4076).abs() < 1e-4);
    assert!((cross_entropy_loss(Array1::zeros(5).view(), 2).unwrap() - 5f64.ln()).abs() < 1e-12);
    assert!(cross_entropy_loss(array![30.0, 0.0].view(), 0).unwrap() < 1e-9);
    assert!(cross_entropy_loss(array![0.0, 0.0].view(), 2).is_err());
}

#[test]
fn two_class_head_probabilities() {
    let order = vec!["a".to_string(), "b".to_string()];
    let head = ClassifierHead::new(array![[1.0, 0.0]], Array1::zeros(2), order).unwrap();
    let p = head.classify(&array![2.0]).unwrap().probabilities;
    assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);
}

#[test]
fn checkpoint_round_trip_preserves_embeddings() {
    let spec = EncoderSpec::reference_tiny(16, 8);
    let encoder = TinyEncoder::new(spec, 5).unwrap();
    let img = RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 13) as u8, (y * 7) as u8, 90]));
    let before = encoder.encode(&img).unwrap();
    let order: Vec<String> = vec!["bog".into(), "fen_marsh_swamp".into()];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ck = Checkpoint {
        head: Some(ClassifierHead::random(8, order.clone(), &mut rng)),
        encoder,
        projection: None,
        class_order: order,
        taxonomy_ref: "test".into(),
        metadata: serde_json::json!({}),
    };
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let after = back.encoder.encode(&img).unwrap();
    assert!((&before - &after).iter().all(|d| d.abs() < 1e-4));
    assert_eq!(back.to_bytes(), ck.to_bytes());
    let bytes = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}
