use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::tape::{Tape, Var};

/// Named parameter matrices in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub(crate) fn push_normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: (usize, usize),
        std: f64,
        rng: &mut R,
    ) -> usize {
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = Array2::from_shape_fn(shape, |_| dist.sample(rng));
        self.push(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn get(&self, i: usize) -> &Array2<f64> {
        &self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Places every matrix on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect()
    }

    /// Rounds every entry to the nearest `f32`, matching what a checkpoint
    /// stores.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }

    /// SHA-256 over names, shapes and values (as `f64` bits).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            h.update(n.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
