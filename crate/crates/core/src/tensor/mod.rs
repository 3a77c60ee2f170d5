//! Dense 64-bit tensors with a tape-based reverse-mode autodiff engine.
//!
//! Every graph value is a row-major matrix. Vectors are `[1, n]` rows and
//! scalars are `[1, 1]`.

mod graph;
pub mod io;
pub mod optim;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_by_global_norm, global_norm, Adam, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("{shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Matrix constructor for internal use; zero-sized dimensions allowed.
    pub(crate) fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::mat(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self::mat(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(x: f64) -> Self {
        Self::mat(1, 1, vec![x])
    }

    /// A `[1, n]` row vector.
    pub fn row(values: &[f64]) -> Self {
        Self::mat(1, values.len(), values.to_vec())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Ok(Self::mat(rows.len(), cols, rows.concat()))
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self::mat(rows, cols, data)
    }

    /// Glorot/Xavier uniform initialisation.
    pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Self::uniform(rows, cols, bound, rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
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
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::mat(c, r, out)
    }

    /// `self · other` for row-major matrices.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("[{m}, {k}] x [{k2}, {n}]"),
            });
        }
        Ok(Tensor::mat(m, n, matmul_raw(&self.data, &other.data, m, k, n)))
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Softmax of one vector; `mask[k] == false` entries get exactly 0.
pub fn masked_softmax(x: &[f64], mask: &[bool]) -> Vec<f64> {
    graph::masked_softmax_rows(x, mask, x.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies values from `other` for every parameter with the same name
    /// and shape.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .find(&p.name)
                .ok_or_else(|| Error::Format(format!("missing parameter {}", p.name)))?;
            let src = &other.get(id).value;
            if src.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}
