use serde::{Deserialize, Serialize};

use super::ShapeError;

/// Dense row-major matrix of `f64`. Vectors are `1 x n` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        if data.len() != rows * cols {
            return Err(ShapeError::new(
                "new",
                [rows, cols],
                [data.len(), 1],
            ));
        }
        Ok(Self {
            shape: [rows, cols],
            data,
        })
    }

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

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            shape: [1, data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::row_vector(vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ShapeError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(ShapeError::new("from_rows", [rows.len(), cols], [1, r.len()]));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: [rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a `1 x 1` tensor.
    pub fn item(&self) -> Option<f64> {
        (self.shape == [1, 1]).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, ShapeError> {
        let [n, k] = self.shape;
        let [k2, m] = other.shape;
        if k != k2 {
            return Err(ShapeError::new("matmul", self.shape, other.shape));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: [n, m],
            data: out,
        })
    }

    pub fn transpose(&self) -> Tensor {
        let [r, c] = self.shape;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: [c, r],
            data,
        }
    }

    /// Adds `b` broadcast along rows and/or columns. `b` must be `r x c`,
    /// `1 x c`, `r x 1` or `1 x 1`.
    pub fn add_broadcast(&self, b: &Tensor) -> Result<Tensor, ShapeError> {
        let [r, c] = self.shape;
        let [br, bc] = b.shape;
        if !((br == r || br == 1) && (bc == c || bc == 1)) {
            return Err(ShapeError::new("add", self.shape, b.shape));
        }
        let mut out = self.clone();
        for i in 0..r {
            for j in 0..c {
                let bi = if br == 1 { 0 } else { i };
                let bj = if bc == 1 { 0 } else { j };
                out.data[i * c + j] += b.data[bi * bc + bj];
            }
        }
        Ok(out)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor, ShapeError> {
        let cols = parts.first().map_or(0, |t| t.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(ShapeError::new("concat_rows", parts[0].shape, p.shape));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: [rows, cols],
            data,
        })
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor, ShapeError> {
        let rows = parts.first().map_or(0, |t| t.rows());
        if let Some(p) = parts.iter().find(|p| p.rows() != rows) {
            return Err(ShapeError::new("concat_cols", parts[0].shape, p.shape));
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Tensor {
            shape: [rows, cols],
            data,
        })
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor, ShapeError> {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.rows() {
                return Err(ShapeError::new("gather_rows", self.shape, [i, c]));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Tensor {
            shape: [indices.len(), c],
            data,
        })
    }

    /// Column means, `1 x c`. Empty input yields zeros.
    pub fn mean_rows(&self) -> Tensor {
        let [r, c] = self.shape;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        if r > 0 {
            for o in &mut out {
                *o /= r as f64;
            }
        }
        Tensor {
            shape: [1, c],
            data: out,
        }
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&self) -> Tensor {
        let [r, c] = self.shape;
        let mut data = self.data.clone();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Tensor {
            shape: [r, c],
            data,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
