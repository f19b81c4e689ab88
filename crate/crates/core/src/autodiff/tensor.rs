//! Dense row-major 2-D `f64` tensors.
//!
//! Everything the classifier touches is a matrix (scalars are 1x1), which
//! keeps shape handling trivial and avoids a broadcasting engine.

use crate::error::{Error, Result};
use crate::parallel;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("{}x{} needs {} values, got {}", rows, cols, rows * cols, data.len()),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![value] }
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Extract the single element of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, rows: usize, cols: usize) -> Result<Tensor> {
        Tensor::new(rows, cols, self.data.clone())
    }
}

/// `a @ b`; row-parallel when the `parallel` feature is on.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_impl(a, b, true)
}

/// Sequential twin of [`matmul`], kept callable for benchmarks.
pub fn matmul_seq(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_impl(a, b, false)
}

fn matmul_impl(a: &Tensor, b: &Tensor, par: bool) -> Result<Tensor> {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            detail: format!("{}x{} @ {}x{}", m, k, k2, n),
        });
    }
    let mut out = vec![0.0; m * n];
    let kernel = |i: usize, row: &mut [f64]| {
        let a_row = a.row(i);
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b.data[l * n..(l + 1) * n];
            for (o, &b_lj) in row.iter_mut().zip(b_row) {
                *o += a_il * b_lj;
            }
        }
    };
    if par {
        parallel::for_each_row(&mut out, n, kernel);
    } else {
        parallel::for_each_row_seq(&mut out, n, kernel);
    }
    Tensor::new(m, n, out)
}

pub fn transpose(x: &Tensor) -> Tensor {
    let (r, c) = x.shape();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data[i * c + j];
        }
    }
    Tensor { rows: c, cols: r, data: out }
}
