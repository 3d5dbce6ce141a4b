use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error)]
pub enum NumError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {why}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        why: String,
    },
    #[error("softmax: row {row} is entirely masked (-inf)")]
    DegenerateRow { row: usize },
    #[error("gradient for parameter '{name}' is not finite")]
    PoisonedGradient { name: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Config(String),
}

/// Dense row-major tensor of f64 values.
///
/// All model math runs in f64: the gradient-check tolerances used by the
/// test suites (1e-4 relative against central differences) are not reliable
/// in f32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumError::BadShape {
                op: "Tensor::new",
                shape,
                why: format!("shape holds {} elements but data has {}", n, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// 1x1 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Row vector (1 x n).
    pub fn row(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumError::BadShape {
                    op: "Tensor::from_rows",
                    shape: vec![r, row.len()],
                    why: "ragged rows".into(),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when interpreted as a matrix (1-D tensors are rows).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Number of columns when interpreted as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() <= 2
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    /// Single value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Reshape without moving data; the element count must match.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, NumError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NumError::BadShape {
                op: "reshape",
                shape,
                why: format!("tensor has {} elements", self.data.len()),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transposed(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), NumError> {
        if self.shape != other.shape {
            return Err(NumError::ShapeMismatch {
                op: "add_assign",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// Matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumError> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(NumError::ShapeMismatch {
            op: "matmul",
            left: a.shape.to_vec(),
            right: b.shape.to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    // i-k-j loop order keeps the inner loop contiguous in both b and out.
    for i in 0..m {
        for kk in 0..k {
            let av = a.data[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(out)
}

/// Row-wise softmax with max-subtraction; `-inf` entries map to exactly 0.
///
/// A row whose entries are all `-inf` has no admissible mass and is an error.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor, NumError> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(NumError::DegenerateRow { row: i });
        }
        let orow = &mut out.data[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for j in 0..c {
            // exp(-inf) == 0 exactly, which is what masked entries need.
            let e = (row[j] - max).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}
