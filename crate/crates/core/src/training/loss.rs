use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(scores)[true_class]`.
pub fn cross_entropy_loss(scores: ArrayView1<f64>, true_class: usize) -> Result<f64> {
    if true_class >= scores.len() {
        return Err(Error::InvalidParameter(format!(
            "class index {true_class} out of range for {} scores",
            scores.len()
        )));
    }
    Ok((log_sum_exp(scores.iter().copied()) - scores[true_class]).max(0.0))
}

/// Mean cross-entropy over a `B×C` logit batch, with its gradient
/// `(softmax - onehot) / B`.
pub fn cross_entropy_batch(logits: &Array2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let b = logits.nrows();
    if b == 0 || b != targets.len() {
        return Err(Error::Shape(format!("{} logit rows for {} targets", b, targets.len())));
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        total += cross_entropy_loss(row, t)?;
        let lse = log_sum_exp(row.iter().copied());
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *g = (p - if j == t { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((total / b as f64, grad))
}

/// Supervised contrastive loss with the summation outside the log.
///
/// For anchor `i`, positives `P(i)` are the other rows sharing its label and
/// candidates `A(i)` are all other rows:
/// `l_i = -1/|P(i)| Σ_p log( exp(z_i·z_p/τ) / Σ_a exp(z_i·z_a/τ) )`.
/// The result is the mean over anchors with at least one positive.
/// Rows must have unit length.
pub fn supcon_loss(projections: &Array2<f64>, labels: &[usize], temperature: f64) -> Result<f64> {
    check_unit_rows(projections)?;
    Ok(supcon_loss_and_grad(projections, labels, temperature)?.0)
}

fn check_unit_rows(z: &Array2<f64>) -> Result<()> {
    for (i, row) in z.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidParameter(format!(
                "projection {i} has norm {norm}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Loss and its gradient with respect to the rows of `projections`, which
/// are treated as free variables (no unit-norm check).
pub fn supcon_loss_and_grad(
    projections: &Array2<f64>,
    labels: &[usize],
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    let n = projections.nrows();
    if n < 2 || labels.len() != n {
        return Err(Error::Shape(format!(
            "contrastive batch needs >= 2 rows and one label per row, got {n} rows and {} labels",
            labels.len()
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let sim = projections.dot(&projections.t()) / temperature;
    let anchors: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|j| j != i && labels[j] == labels[i]))
        .collect();
    if anchors.is_empty() {
        return Err(Error::Degenerate(
            "contrastive batch has no pair sharing a label".into(),
        ));
    }
    let scale = 1.0 / anchors.len() as f64;
    let mut g = Array2::<f64>::zeros((n, n));
    let mut loss = 0.0;
    for &i in &anchors {
        let others = (0..n).filter(|&a| a != i);
        let lse = log_sum_exp(others.clone().map(|a| sim[[i, a]]));
        let positives: Vec<usize> = others.clone().filter(|&p| labels[p] == labels[i]).collect();
        let inv_p = 1.0 / positives.len() as f64;
        loss += positives.iter().map(|&p| lse - sim[[i, p]]).sum::<f64>() * inv_p;
        for a in others {
            g[[i, a]] += scale * (sim[[i, a]] - lse).exp();
        }
        for &p in &positives {
            g[[i, p]] -= scale * inv_p;
        }
    }
    let grad = (&g + &g.t()).dot(projections) / temperature;
    Ok((loss * scale, grad))
}
