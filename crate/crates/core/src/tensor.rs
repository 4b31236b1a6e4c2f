//! Dense f32 tensors and named tensor collections.
//!
//! Storage is a flat row-major `Vec<f32>`. Reductions (matmul inner products,
//! norms, means) accumulate in f64 so that finite-difference gradient checks
//! stay usable at f32 precision.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, ...]", &self.data[..8])
        }
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value of a zero-dim or single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    /// Matrix product of two 2-d tensors, accumulating in f64.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.shape.len(), 2, "matmul lhs must be 2-d");
        assert_eq!(rhs.shape.len(), 2, "matmul rhs must be 2-d");
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        assert_eq!(k, k2, "matmul inner dims: {} vs {}", k, k2);
        let mut out = vec![0.0f32; m * n];
        let mut acc = vec![0.0f64; n];
        for i in 0..m {
            acc.fill(0.0);
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[p * n..(p + 1) * n];
                let a = a as f64;
                for (o, &b) in acc.iter_mut().zip(b_row.iter()) {
                    *o += a * b as f64;
                }
            }
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(acc.iter()) {
                *o = v as f32;
            }
        }
        Tensor {
            shape: vec![m, n],
            data: out,
        }
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.shape.len(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, rhs: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        assert_eq!(self.shape, rhs.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(rhs.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// self += scale * rhs
    pub fn add_scaled(&mut self, rhs: &Tensor, scale: f32) {
        assert_eq!(self.shape, rhs.shape, "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(rhs.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn dot(&self, rhs: &Tensor) -> f64 {
        assert_eq!(self.shape, rhs.shape, "dot shape mismatch");
        self.data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn sq_l2_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

/// Ordered collection of named tensors (model parameters, gradients, deltas).
///
/// `BTreeMap` keeps iteration order deterministic, which every aggregation
/// and serialization path relies on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors(pub BTreeMap<String, Tensor>);

impl NamedTensors {
    pub fn new() -> Self {
        NamedTensors(BTreeMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn total_params(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    /// Checks the two collections have identical names and shapes.
    pub fn check_congruent(&self, other: &NamedTensors) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor count: {} vs {}",
                self.0.len(),
                other.0.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.0.iter().zip(other.0.iter()) {
            if na != nb {
                return Err(Error::ShapeMismatch(format!(
                    "tensor names diverge: `{na}` vs `{nb}`"
                )));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "`{na}`: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Element-wise `self - other`.
    pub fn sub(&self, other: &NamedTensors) -> Result<NamedTensors> {
        self.check_congruent(other)?;
        let mut out = NamedTensors::new();
        for (name, a) in self.iter() {
            let b = &other.0[name];
            out.insert(name.clone(), a.zip_map(b, |x, y| x - y));
        }
        Ok(out)
    }

    /// Element-wise `self + scale * other`.
    pub fn add_scaled(&mut self, other: &NamedTensors, scale: f32) -> Result<()> {
        self.check_congruent(other)?;
        for (name, a) in self.0.iter_mut() {
            a.add_scaled(&other.0[name], scale);
        }
        Ok(())
    }

    pub fn sq_l2_distance(&self, other: &NamedTensors) -> Result<f64> {
        self.check_congruent(other)?;
        let mut acc = 0.0f64;
        for (name, a) in self.iter() {
            let b = &other.0[name];
            for (&x, &y) in a.data().iter().zip(b.data().iter()) {
                let d = x as f64 - y as f64;
                acc += d * d;
            }
        }
        Ok(acc)
    }

    /// Exact bitwise equality of all values (names, shapes, and f32 bits).
    pub fn bitwise_eq(&self, other: &NamedTensors) -> bool {
        if self.check_congruent(other).is_err() {
            return false;
        }
        self.iter().zip(other.iter()).all(|((_, a), (_, b))| {
            a.data()
                .iter()
                .zip(b.data().iter())
                .all(|(&x, &y)| x.to_bits() == y.to_bits())
        })
    }
}

impl FromIterator<(String, Tensor)> for NamedTensors {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        NamedTensors(iter.into_iter().collect())
    }
}
