use std::sync::Arc;

use super::matrix::Matrix;
use super::ops;
use crate::error::Result;

/// A named learnable tensor. The value is shared so that evaluation and taping
/// can reference it without copying.
#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    value: Arc<Matrix>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        Self {
            name: name.into(),
            value: Arc::new(value),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn shared(&self) -> Arc<Matrix> {
        Arc::clone(&self.value)
    }

    pub fn value_mut(&mut self) -> &mut Matrix {
        Arc::make_mut(&mut self.value)
    }

    pub fn set(&mut self, value: Matrix) {
        self.value = Arc::new(value);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns learnable parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// The operation set the model layers are written against. [`Eval`] computes
/// values only; [`super::Tape`] additionally records them for reverse-mode
/// differentiation.
pub trait Backend {
    type T: Clone;

    fn value<'a>(&'a self, t: &'a Self::T) -> &'a Matrix;
    fn constant(&mut self, m: Matrix) -> Self::T;
    fn param(&mut self, p: &Param) -> Self::T;

    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    /// `a · bᵀ`
    fn matmul_nt(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn add_row(&mut self, x: &Self::T, row: &Self::T) -> Result<Self::T>;
    fn scale(&mut self, x: &Self::T, s: f64) -> Self::T;
    fn softmax_rows(&mut self, x: &Self::T) -> Result<Self::T>;
    fn masked_softmax_rows(&mut self, x: &Self::T, selection: &[Vec<usize>]) -> Result<Self::T>;
    fn layer_norm(&mut self, x: &Self::T, gain: &Self::T, bias: &Self::T, eps: f64)
        -> Result<Self::T>;
    fn gelu(&mut self, x: &Self::T) -> Self::T;
    fn slice_cols(&mut self, x: &Self::T, start: usize, len: usize) -> Result<Self::T>;
    fn concat_cols(&mut self, parts: &[Self::T]) -> Result<Self::T>;
    fn gather_rows(&mut self, x: &Self::T, idx: &[usize]) -> Result<Self::T>;
    fn scatter_rows(&mut self, x: &Self::T, idx: &[usize], rows: usize) -> Result<Self::T>;
    fn column(&mut self, x: &Self::T, j: usize) -> Result<Self::T>;
    fn scale_rows(&mut self, x: &Self::T, s: &Self::T) -> Result<Self::T>;
    fn mean_rows(&mut self, x: &Self::T) -> Result<Self::T>;
    fn sum_all(&mut self, x: &Self::T) -> Self::T;
}

/// Value-only backend.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

type Shared = Arc<Matrix>;

fn wrap(m: Matrix) -> Shared {
    Arc::new(m)
}

impl Backend for Eval {
    type T = Shared;

    fn value<'a>(&'a self, t: &'a Shared) -> &'a Matrix {
        t
    }

    fn constant(&mut self, m: Matrix) -> Shared {
        wrap(m)
    }

    fn param(&mut self, p: &Param) -> Shared {
        p.shared()
    }

    fn matmul(&mut self, a: &Shared, b: &Shared) -> Result<Shared> {
        ops::matmul(a, b).map(wrap)
    }

    fn matmul_nt(&mut self, a: &Shared, b: &Shared) -> Result<Shared> {
        ops::matmul_nt(a, b).map(wrap)
    }

    fn add(&mut self, a: &Shared, b: &Shared) -> Result<Shared> {
        ops::add(a, b).map(wrap)
    }

    fn mul(&mut self, a: &Shared, b: &Shared) -> Result<Shared> {
        ops::mul(a, b).map(wrap)
    }

    fn add_row(&mut self, x: &Shared, row: &Shared) -> Result<Shared> {
        ops::add_row(x, row).map(wrap)
    }

    fn scale(&mut self, x: &Shared, s: f64) -> Shared {
        wrap(ops::scale(x, s))
    }

    fn softmax_rows(&mut self, x: &Shared) -> Result<Shared> {
        ops::softmax_rows(x).map(wrap)
    }

    fn masked_softmax_rows(&mut self, x: &Shared, selection: &[Vec<usize>]) -> Result<Shared> {
        ops::masked_softmax_rows(x, selection).map(wrap)
    }

    fn layer_norm(&mut self, x: &Shared, gain: &Shared, bias: &Shared, eps: f64) -> Result<Shared> {
        ops::layer_norm(x, gain, bias, eps).map(wrap)
    }

    fn gelu(&mut self, x: &Shared) -> Shared {
        wrap(ops::gelu(x))
    }

    fn slice_cols(&mut self, x: &Shared, start: usize, len: usize) -> Result<Shared> {
        ops::slice_cols(x, start, len).map(wrap)
    }

    fn concat_cols(&mut self, parts: &[Shared]) -> Result<Shared> {
        let refs: Vec<&Matrix> = parts.iter().map(|p| p.as_ref()).collect();
        ops::concat_cols(&refs).map(wrap)
    }

    fn gather_rows(&mut self, x: &Shared, idx: &[usize]) -> Result<Shared> {
        ops::gather_rows(x, idx).map(wrap)
    }

    fn scatter_rows(&mut self, x: &Shared, idx: &[usize], rows: usize) -> Result<Shared> {
        ops::scatter_rows(x, idx, rows).map(wrap)
    }

    fn column(&mut self, x: &Shared, j: usize) -> Result<Shared> {
        ops::column(x, j).map(wrap)
    }

    fn scale_rows(&mut self, x: &Shared, s: &Shared) -> Result<Shared> {
        ops::scale_rows(x, s).map(wrap)
    }

    fn mean_rows(&mut self, x: &Shared) -> Result<Shared> {
        ops::mean_rows(x).map(wrap)
    }

    fn sum_all(&mut self, x: &Shared) -> Shared {
        wrap(ops::sum_all(x))
    }
}
