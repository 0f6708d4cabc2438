use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit reals. Batches of samples are stored one
/// sample per row; per-channel vectors are plain `Vec<f64>` at call sites.
///
/// Invariants: `rows * cols == data.len()`; entries stay finite through every
/// public operation (checked at construction, preserved by the arithmetic
/// here, and re-checked by the training loop's divergence guard).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::InvalidArg(format!(
                "tensor data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArg("tensor entries must be finite".into()));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_row(v: Vec<f64>) -> Result<Self> {
        let cols = v.len();
        Tensor::new(1, cols, v)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn set_row(&mut self, r: usize, v: &[f64]) {
        debug_assert_eq!(v.len(), self.cols);
        self.data[r * self.cols..(r + 1) * self.cols].copy_from_slice(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self (n×k) · rhs (k×m) -> n×m`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for (kk, &a) in arow.iter().enumerate() {
                let brow = &rhs.data[kk * m..(kk + 1) * m];
                for j in 0..m {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(Tensor {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `selfᵀ (c1×n) · rhs (n×c2) -> c1×c2` without materializing the
    /// transpose; the backprop workhorse for weight gradients.
    pub fn matmul_tn(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rows != rhs.rows {
            return Err(Error::shape("matmul_tn", self.shape(), rhs.shape()));
        }
        let (n, c1, c2) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0; c1 * c2];
        for i in 0..n {
            let arow = &self.data[i * c1..(i + 1) * c1];
            let brow = &rhs.data[i * c2..(i + 1) * c2];
            for (p, &a) in arow.iter().enumerate() {
                let orow = &mut out[p * c2..(p + 1) * c2];
                for q in 0..c2 {
                    orow[q] += a * brow[q];
                }
            }
        }
        Ok(Tensor {
            rows: c1,
            cols: c2,
            data: out,
        })
    }

    /// `self (n×k) · rhsᵀ (k×m) -> n×m` where rhs is m×k.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.cols != rhs.cols {
            return Err(Error::shape("matmul_nt", self.shape(), rhs.shape()));
        }
        let (n, k, m) = (self.rows, self.cols, rhs.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                let brow = &rhs.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += arow[kk] * brow[kk];
                }
                orow[j] = acc;
            }
        }
        Ok(Tensor {
            rows: n,
            cols: m,
            data: out,
        })
    }

    fn zip_with(&self, rhs: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(op, self.shape(), rhs.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn rowwise(&self, v: &[f64], op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if v.len() != self.cols {
            return Err(Error::shape(op, self.shape(), (1, v.len())));
        }
        let mut data = self.data.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let x = &mut data[r * self.cols + c];
                *x = f(*x, v[c]);
            }
        }
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Add `v` to every row (bias broadcast).
    pub fn add_row_vec(&self, v: &[f64]) -> Result<Tensor> {
        self.rowwise(v, "add_row_vec", |a, b| a + b)
    }

    pub fn mul_row_vec(&self, v: &[f64]) -> Result<Tensor> {
        self.rowwise(v, "mul_row_vec", |a, b| a * b)
    }

    pub fn div_row_vec(&self, v: &[f64]) -> Result<Tensor> {
        self.rowwise(v, "div_row_vec", |a, b| a / b)
    }

    /// Per-column mean over rows.
    pub fn mean_cols(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c] += self.get(r, c);
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Per-column population standard deviation over rows.
    pub fn std_cols(&self) -> Vec<f64> {
        let mu = self.mean_cols();
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let d = self.get(r, c) - mu[c];
                out[c] += d * d;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|v| *v = (*v / n).sqrt());
        out
    }

    pub fn mean_all(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn dot(&self, rhs: &Tensor) -> Result<f64> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("dot", self.shape(), rhs.shape()));
        }
        Ok(self.data.iter().zip(&rhs.data).map(|(&a, &b)| a * b).sum())
    }

    /// Frobenius norm of the whole tensor.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// dot(a,b) / (‖a‖‖b‖) over flattened entries. Zero-norm input is an error.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArg("cosine of zero vector".into()));
    }
    Ok(a.dot(b)? / (na * nb))
}
