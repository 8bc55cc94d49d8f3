use ndarray::{Array1, Array2};
use rand::Rng;

use super::attention::softmax_rows;
use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Raw class scores and their softmax, both in head class order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub raw: Array1<f64>,
    pub probabilities: Array1<f64>,
}

/// Linear map `D → |L3|`. Parameters are `weights` (`D×C`) then `bias`
/// (`1×C`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    params: ParamStore,
    class_order: Vec<String>,
}

impl ClassifierHead {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, class_order: Vec<String>) -> Result<Self> {
        let c = class_order.len();
        if weights.ncols() != c || bias.len() != c {
            return Err(Error::Shape(format!(
                "head maps to {} / {} outputs but class order has {c}",
                weights.ncols(),
                bias.len()
            )));
        }
        let mut params = ParamStore::new();
        params.push("weights", weights);
        params.push("bias", bias.insert_axis(ndarray::Axis(0)));
        Ok(ClassifierHead { params, class_order })
    }

    pub fn zeros(dim: usize, class_order: Vec<String>) -> Self {
        let c = class_order.len();
        ClassifierHead::new(Array2::zeros((dim, c)), Array1::zeros(c), class_order).expect("consistent shapes")
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, class_order: Vec<String>, rng: &mut R) -> Self {
        let mut head = ClassifierHead::zeros(dim, class_order);
        let mut fresh = ParamStore::new();
        fresh.push_normal("weights", head.params.get(0).dim(), 1.0 / (dim as f64).sqrt(), rng);
        fresh.push("bias", head.params.get(1).clone());
        head.params = fresh;
        head
    }

    pub fn from_params(params: ParamStore, class_order: Vec<String>) -> Result<Self> {
        let (w, b) = match (params.index_of("weights"), params.index_of("bias")) {
            (Some(w), Some(b)) => (params.get(w).clone(), params.get(b).clone()),
            _ => return Err(Error::Checkpoint("head needs `weights` and `bias`".into())),
        };
        if b.nrows() != 1 {
            return Err(Error::Checkpoint("head bias must be a single row".into()));
        }
        ClassifierHead::new(w, b.row(0).to_owned(), class_order)
    }

    pub fn input_dim(&self) -> usize {
        self.params.get(0).nrows()
    }

    pub fn class_order(&self) -> &[String] {
        &self.class_order
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `B×C` logits for a `B×D` batch on the tape.
    pub fn logits(&self, tape: &mut Tape, vars: &[Var], embeddings: Var) -> Var {
        let z = tape.matmul(embeddings, vars[0]);
        tape.add_row(z, vars[1])
    }

    pub fn classify(&self, embedding: &Array1<f64>) -> Result<ClassScores> {
        if embedding.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "embedding has dimension {}, head expects {}",
                embedding.len(),
                self.input_dim()
            )));
        }
        let raw = embedding.dot(self.params.get(0)) + self.params.get(1).row(0);
        let probabilities = softmax(&raw);
        Ok(ClassScores { raw, probabilities })
    }
}

pub fn softmax(scores: &Array1<f64>) -> Array1<f64> {
    softmax_rows(&scores.clone().insert_axis(ndarray::Axis(0)))
        .row(0)
        .to_owned()
}

/// Two-layer perceptron `D → h → p` with ReLU in between and unit-length
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    params: ParamStore,
}

impl ProjectionHead {
    pub fn new(w1: Array2<f64>, b1: Array1<f64>, w2: Array2<f64>, b2: Array1<f64>) -> Result<Self> {
        if w1.ncols() != b1.len() || w1.ncols() != w2.nrows() || w2.ncols() != b2.len() {
            return Err(Error::Shape("projection head layer shapes disagree".into()));
        }
        let mut params = ParamStore::new();
        params.push("w1", w1);
        params.push("b1", b1.insert_axis(ndarray::Axis(0)));
        params.push("w2", w2);
        params.push("b2", b2.insert_axis(ndarray::Axis(0)));
        Ok(ProjectionHead { params })
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        params.push_normal("w1", (dim, hidden), 1.0 / (dim as f64).sqrt(), rng);
        params.push("b1", Array2::zeros((1, hidden)));
        params.push_normal("w2", (hidden, out), 1.0 / (hidden as f64).sqrt(), rng);
        params.push("b2", Array2::zeros((1, out)));
        ProjectionHead { params }
    }

    pub fn from_params(params: ParamStore) -> Result<Self> {
        let get = |n: &str| {
            params
                .index_of(n)
                .map(|i| params.get(i).clone())
                .ok_or_else(|| Error::Checkpoint(format!("projection head missing `{n}`")))
        };
        let row = |m: Array2<f64>| m.row(0).to_owned();
        ProjectionHead::new(get("w1")?, row(get("b1")?), get("w2")?, row(get("b2")?))
    }

    pub fn input_dim(&self) -> usize {
        self.params.get(0).nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.params.get(2).ncols()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `B×p` unit rows for a `B×D` batch on the tape.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], embeddings: Var) -> Result<Var> {
        let h = tape.matmul(embeddings, vars[0]);
        let h = tape.add_row(h, vars[1]);
        let h = tape.relu(h);
        let h = tape.matmul(h, vars[2]);
        let h = tape.add_row(h, vars[3]);
        tape.l2_normalize_rows(h)
    }

    pub fn project(&self, embedding: &Array1<f64>) -> Result<Array1<f64>> {
        if embedding.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "embedding has dimension {}, projection expects {}",
                embedding.len(),
                self.input_dim()
            )));
        }
        let p = &self.params;
        let h = (embedding.dot(p.get(0)) + p.get(1).row(0)).mapv(|x| x.max(0.0));
        let z = h.dot(p.get(2)) + p.get(3).row(0);
        let norm = z.dot(&z).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Degenerate(
                "projection is the zero vector before normalization".into(),
            ));
        }
        Ok(z / norm)
    }
}
