use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors with gradient slots of matching shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: u32,
    tensors: BTreeMap<String, Tensor>,
}

const FORMAT: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.rows(), value.cols()));
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
        self.add(name, Tensor { shape: [rows, cols], data })
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn add_filled(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, Tensor::filled(rows, cols, v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self ← ξ·online + (1 − ξ)·self`, evaluated in exactly that form.
    pub fn soft_update_from(&mut self, online: &ParamStore, xi: f64) {
        assert_eq!(self.names, online.names, "architectures differ");
        for (t, o) in self.values.iter_mut().zip(&online.values) {
            for (a, b) in t.data.iter_mut().zip(&o.data) {
                *a = xi * b + (1.0 - xi) * *a;
            }
        }
    }

    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.names, other.names, "architectures differ");
        self.values.clone_from(&other.values);
    }

    /// JSON with tensors sorted by name.
    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            format: FORMAT,
            tensors: self.names.iter().cloned().zip(self.values.iter().cloned()).collect(),
        };
        serde_json::to_string(&ck).expect("finite tensors serialize")
    }

    /// Loads values into an existing layout; names and shapes must match.
    pub fn load_json(&mut self, text: &str) -> Result<(), NnError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let ck: Checkpoint = serde_path_to_error::deserialize(de).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if ck.format != FORMAT {
            return Err(NnError::Checkpoint(format!("unsupported format {}", ck.format)));
        }
        if ck.tensors.len() != self.names.len() {
            return Err(NnError::Checkpoint(format!(
                "{} tensors, expected {}",
                ck.tensors.len(),
                self.names.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let t = ck
                .tensors
                .get(name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape != self.values[i].shape || t.data.len() != t.shape[0] * t.shape[1] {
                return Err(NnError::Checkpoint(format!("shape mismatch for {name}")));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }
}
