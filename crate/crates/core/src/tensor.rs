//! Minimal dense row-major matrix plus the JSON tensor dump used for
//! checkpoints.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Matrix { rows, cols, data: (0..rows * cols).map(|_| normal.sample(rng)).collect() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self * x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self^T * y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), &mut out);
            }
        }
        out
    }

    /// `self += scale * y x^T`
    pub fn add_outer(&mut self, scale: f64, y: &[f64], x: &[f64]) {
        for (r, &yr) in y.iter().enumerate() {
            let s = scale * yr;
            if s != 0.0 {
                axpy(s, x, self.row_mut(r));
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// One named tensor in a dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(name: &str, m: &Matrix) -> Self {
        Tensor { name: name.to_owned(), shape: vec![m.rows, m.cols], data: m.data.clone() }
    }

    pub fn from_vector(name: &str, v: &[f64]) -> Self {
        Tensor { name: name.to_owned(), shape: vec![v.len()], data: v.to_vec() }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            &[r, c] => Matrix::from_vec(r, c, self.data.clone()),
            s => Err(Error::dim(format!("tensor {} has shape {s:?}, expected 2-d", self.name))),
        }
    }

    pub fn to_vector(&self) -> Result<Vec<f64>> {
        match self.shape.as_slice() {
            &[n] if n == self.data.len() => Ok(self.data.clone()),
            s => Err(Error::dim(format!("tensor {} has shape {s:?}, expected 1-d", self.name))),
        }
    }
}

/// A JSON tensor dump: `{"format": ..., "meta": {...}, "tensors": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDump {
    pub format: String,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<Tensor>,
}

pub const DUMP_FORMAT: &str = "plausible-tensors/1";

impl TensorDump {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        TensorDump { format: DUMP_FORMAT.to_owned(), meta: Default::default(), tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::invalid(format!("tensor {name:?} missing from dump")))
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let dump: TensorDump = serde_json::from_reader(input)?;
        if dump.format != DUMP_FORMAT {
            return Err(Error::invalid(format!("unsupported tensor dump format {:?}", dump.format)));
        }
        for t in &dump.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::dim(format!("tensor {} shape {:?} does not match data", t.name, t.shape)));
            }
        }
        Ok(dump)
    }
}
