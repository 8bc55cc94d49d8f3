//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over
//! the node list visits every node after all of its consumers.

use ndarray::{Array1, Array2, Axis};

use super::attention;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    L2NormalizeRows {
        x: Var,
        norms: Array1<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        weights: Array2<f64>,
    },
    /// Scalar whose gradient with respect to `input` was computed up front.
    ScalarLoss {
        input: Var,
        grad: Array2<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where no gradient flowed.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Array2<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0[v.0].as_ref()
    }

    /// Gradient, or zeros of the given shape when nothing flowed.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that does not.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1×m` row to every row of an `n×m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Row-wise layer normalization with learned `1×m` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let m = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / m;
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|c| c * c).sum_axis(Axis(1)) / m;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * inv_std.view().insert_axis(Axis(1));
        let value = &xhat * self.value(gain) + self.value(bias);
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Column means as a `1×m` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty")
            .insert_axis(Axis(0));
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanRows(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("equal column counts");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Scales each row to unit Euclidean length. All-zero rows are an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let norms = xv.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
            return Err(Error::Degenerate(format!(
                "row {i} has norm {} and cannot be normalized",
                norms[i]
            )));
        }
        let value = xv / &norms.view().insert_axis(Axis(1));
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// `softmax(QKᵀ/√d)V` as one node.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let weights = attention::attention_weights(self.value(q), self.value(k))?;
        let value = weights.dot(self.value(v));
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, weights }, rg))
    }

    /// Records a precomputed scalar loss and its gradient w.r.t. `input`.
    pub fn scalar_loss(&mut self, input: Var, value: f64, grad: Array2<f64>) -> Var {
        debug_assert_eq!(grad.dim(), self.value(input).dim());
        let rg = self.rg(&[input]);
        self.push(Array2::from_elem((1, 1), value), Op::ScalarLoss { input, grad }, rg)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = Array2::ones(self.value(root).dim());
        self.backward_with(root, seed)
    }

    /// Back-propagates an explicit upstream gradient from `root`.
    pub fn backward_with(&self, root: Var, seed: Array2<f64>) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients(grads)
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |v: Var, delta: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&self.value(*b).t()));
                acc(*b, self.value(*a).t().dot(g));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(*a, g * &mask);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                acc(*gain, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * self.value(*gain);
                let m = xhat.ncols() as f64;
                let sum_d = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
                let sum_dx = (&dxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                let dx = (dxhat * m - sum_d - xhat * &sum_dx) * (inv_std / m).view().insert_axis(Axis(1));
                acc(*x, dx);
            }
            Op::MeanRows(a) => {
                let n = self.value(*a).nrows();
                let row = g / n as f64;
                acc(*a, row.broadcast((n, g.ncols())).expect("1×m row").to_owned());
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).nrows();
                    acc(*p, g.slice(ndarray::s![start..start + rows, ..]).to_owned());
                    start += rows;
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let dots = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let dx = (g - &(y * &dots)) / norms.view().insert_axis(Axis(1));
                acc(*x, dx);
            }
            Op::Attention { q, k, v, weights } => {
                let (dq, dk, dv) =
                    attention::attention_backward(self.value(*q), self.value(*k), self.value(*v), weights, g);
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::ScalarLoss { input, grad } => acc(*input, grad * g[[0, 0]]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(&mut rng))
    }

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for a graph builder.
    fn check_grad(inputs: Vec<Array2<f64>>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |xs: &[Array2<f64>]| -> (f64, Vec<Array2<f64>>) {
            let mut t = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
            let out = build(&mut t, &vars);
            let w = randn(t.value(out).nrows(), t.value(out).ncols(), 99);
            let value = (t.value(out) * &w).sum();
            let grads = t.backward_with(out, w);
            let gs = vars
                .iter()
                .zip(xs)
                .map(|(v, x)| grads.get_or_zeros(*v, x.dim()))
                .collect();
            (value, gs)
        };
        let (_, analytic) = eval(&inputs);
        let h = 1e-6;
        for (which, x) in inputs.iter().enumerate() {
            for idx in 0..x.len() {
                let (r, c) = (idx / x.ncols(), idx % x.ncols());
                let mut plus = inputs.clone();
                plus[which][[r, c]] += h;
                let mut minus = inputs.clone();
                minus[which][[r, c]] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = analytic[which][[r, c]];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "input {which} [{r},{c}]: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn grad_matmul_add_relu() {
        check_grad(vec![randn(3, 4, 1), randn(4, 2, 2), randn(1, 2, 3)], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let b = t.add_row(m, v[2]);
            let s = t.scale(b, 0.7);
            t.relu(s)
        });
    }

    #[test]
    fn grad_layer_norm() {
        check_grad(vec![randn(3, 5, 4), randn(1, 5, 5), randn(1, 5, 6)], |t, v| {
            t.layer_norm(v[0], v[1], v[2])
        });
    }

    #[test]
    fn grad_pool_concat_normalize() {
        check_grad(vec![randn(4, 3, 7), randn(2, 3, 8)], |t, v| {
            let m = t.mean_rows(v[0]);
            let c = t.concat_rows(&[m, v[1]]);
            let added = t.add(c, c);
            t.l2_normalize_rows(added).unwrap()
        });
    }

    #[test]
    fn grad_attention_node() {
        check_grad(vec![randn(3, 4, 9), randn(3, 4, 10), randn(3, 2, 11)], |t, v| {
            t.attention(v[0], v[1], v[2]).unwrap()
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0]]);
        let b = t.param(array![[3.0], [4.0]]);
        let y = t.matmul(a, b);
        let g = t.backward(y);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &array![[1.0], [2.0]]);
    }

    #[test]
    fn zero_row_cannot_be_normalized() {
        let mut t = Tape::new();
        let a = t.param(array![[0.0, 0.0]]);
        assert!(t.l2_normalize_rows(a).is_err());
    }
}
