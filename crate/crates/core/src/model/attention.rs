//! Scaled dot-product attention, `softmax(QKᵀ/√d)V`, with its analytic
//! gradient.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Query/key/value matrices: `Q` and `K` are `n×d`, `V` is `n×d_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInput {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

impl AttentionInput {
    pub fn new(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>) -> Result<Self> {
        check_shapes(&q, &k, Some(&v))?;
        Ok(AttentionInput { q, k, v })
    }

    /// Key dimension used in the `√d` scaling.
    pub fn key_dim(&self) -> usize {
        self.q.ncols()
    }
}

fn check_shapes(q: &Array2<f64>, k: &Array2<f64>, v: Option<&Array2<f64>>) -> Result<()> {
    if q.ncols() == 0 {
        return Err(Error::Shape("key dimension d must be positive".into()));
    }
    if k.nrows() == 0 || q.nrows() == 0 {
        return Err(Error::Shape("attention needs at least one row".into()));
    }
    if q.ncols() != k.ncols() {
        return Err(Error::Shape(format!(
            "Q has {} columns but K has {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if let Some(v) = v {
        if v.nrows() != k.nrows() {
            return Err(Error::Shape(format!(
                "K has {} rows but V has {}",
                k.nrows(),
                v.nrows()
            )));
        }
    }
    Ok(())
}

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    out
}

/// The row-stochastic weight matrix `softmax(QKᵀ/√d)`.
pub fn attention_weights(q: &Array2<f64>, k: &Array2<f64>) -> Result<Array2<f64>> {
    check_shapes(q, k, None)?;
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    Ok(softmax_rows(&(q.dot(&k.t()) * scale)))
}

pub fn scaled_dot_attention(input: &AttentionInput) -> Result<Array2<f64>> {
    check_shapes(&input.q, &input.k, Some(&input.v))?;
    Ok(attention_weights(&input.q, &input.k)?.dot(&input.v))
}

/// Gradients of `⟨d_out, Attention(Q,K,V)⟩` with respect to `Q`, `K`, `V`,
/// given the forward weights.
pub fn attention_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    weights: &Array2<f64>,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let dv = weights.t().dot(d_out);
    let dw = d_out.dot(&v.t());
    // softmax Jacobian applied row by row
    let row_dot = (&dw * weights).sum_axis(Axis(1)).insert_axis(Axis(1));
    let ds = weights * &(dw - row_dot) * scale;
    let dq = ds.dot(k);
    let dk = ds.t().dot(q);
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_row_returns_v() {
        let input = AttentionInput::new(array![[0.3, -1.0]], array![[2.0, 0.5]], array![[7.0, -3.0, 1.5]]).unwrap();
        assert_eq!(scaled_dot_attention(&input).unwrap(), array![[7.0, -3.0, 1.5]]);
    }

    #[test]
    fn zero_queries_average_values() {
        let input = AttentionInput::new(
            Array2::zeros((2, 3)),
            array![[1.0, 2.0, 3.0], [-1.0, 0.0, 4.0]],
            array![[1.0, 0.0], [0.0, 1.0]],
        )
        .unwrap();
        let out = scaled_dot_attention(&input).unwrap();
        assert_eq!(out, array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn hand_derived_one_dimensional_case() {
        // row 0: weights softmax([1, 0]) -> 2*e/(e+1) + 4/(e+1)
        let input = AttentionInput::new(array![[1.0], [0.0]], array![[1.0], [0.0]], array![[2.0], [4.0]]).unwrap();
        let out = scaled_dot_attention(&input).unwrap();
        let e = 1f64.exp();
        assert!((out[[0, 0]] - (2.0 * e + 4.0) / (e + 1.0)).abs() < 1e-12);
        assert!((out[[0, 0]] - 2.5378).abs() < 1e-4);
        assert!((out[[1, 0]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        assert!(AttentionInput::new(Array2::zeros((2, 0)), Array2::zeros((2, 0)), Array2::zeros((2, 1))).is_err());
        assert!(AttentionInput::new(Array2::zeros((2, 3)), Array2::zeros((2, 2)), Array2::zeros((2, 1))).is_err());
        assert!(AttentionInput::new(Array2::zeros((2, 3)), Array2::zeros((2, 3)), Array2::zeros((3, 1))).is_err());
    }

    #[test]
    fn softmax_is_shift_stable() {
        let s = softmax_rows(&array![[1000.0, 1000.0], [-1000.0, -1001.0]]);
        assert!(s.iter().all(|x| x.is_finite()));
        assert_eq!(s.row(0).to_vec(), vec![0.5, 0.5]);
    }
}
