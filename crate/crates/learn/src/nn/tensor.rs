use serde::{Deserialize, Serialize};

use super::NnError;

/// Row-major 2-D array of `f64`. Vectors are `[1, n]` or `[n, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::Shape {
                node: "tensor".into(),
                detail: format!("{} values for shape [{rows}, {cols}]", data.len()),
            });
        }
        Ok(Self { shape: [rows, cols], data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            shape: [1, data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NnError::Shape {
                    node: "tensor".into(),
                    detail: "ragged rows".into(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: [rows.len(), cols],
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: [1, 1], data: vec![v] }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `a · b` for `[n, k] × [k, m]`.
    pub fn matmul(&self, b: &Tensor) -> Tensor {
        let (n, k, m) = (self.shape[0], self.shape[1], b.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &b.data[p * m..(p + 1) * m];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Tensor { shape: [n, m], data: out }
    }

    /// `aᵀ · b` without materializing the transpose.
    pub fn t_matmul(&self, b: &Tensor) -> Tensor {
        let (k, n, m) = (self.shape[0], self.shape[1], b.shape[1]);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let brow = &b.data[p * m..(p + 1) * m];
            for i in 0..n {
                let a = self.data[p * n + i];
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Tensor { shape: [n, m], data: out }
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&self, b: &Tensor) -> Tensor {
        let (n, k, m) = (self.shape[0], self.shape[1], b.shape[0]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &b.data[j * k..(j + 1) * k];
                out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        Tensor { shape: [n, m], data: out }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: [c, r], data: out }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
