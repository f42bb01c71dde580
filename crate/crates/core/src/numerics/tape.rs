//! Reverse-mode gradient tape over whole matrices.
//!
//! Every [`Backend`] operation appends one node holding its value and the ids
//! of its operands. Node ids are handed out in evaluation order, so the tape
//! is already topologically sorted and [`Tape::backward`] is a single reverse
//! sweep that visits each reachable node once.

use std::collections::HashMap;
use std::sync::Arc;

use super::backend::{Backend, Param};
use super::matrix::{shape_str, Matrix};
use super::ops;
use crate::error::{contract, HsqError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    Gelu(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: usize,
        idx: Vec<usize>,
    },
    Column {
        x: usize,
        j: usize,
    },
    ScaleRows {
        x: usize,
        s: usize,
    },
    MeanRows(usize),
    SumAll(usize),
}

struct Node {
    value: Arc<Matrix>,
    op: Op,
}

/// Deliberate backward corruption, used to prove the gradient checker fails
/// when it should.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    /// Scales the GELU backward pass by the given factor.
    GeluBackward(f64),
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input that gradients can be queried for via [`Gradients::wrt`].
    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(Arc::new(m), Op::Leaf)
    }

    fn push(&mut self, value: Arc<Matrix>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Sweeps the tape backward from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = self.val(loss);
        if seed.shape() != (1, 1) {
            return Err(contract(format!(
                "backward: loss must be 1x1, got {}",
                shape_str(seed)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut visited = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            visited.push(id);
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            params: self.params.clone(),
            visited,
        })
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[id];
        let v = |i: usize| -> &Matrix { &self.nodes[i].value };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                accumulate(grads, a, ops::matmul_nt(g, v(b))?);
                accumulate(grads, b, ops::matmul_tn(v(a), g)?);
            }
            &Op::MatMulNt(a, b) => {
                accumulate(grads, a, ops::matmul(g, v(b))?);
                accumulate(grads, b, ops::matmul_tn(g, v(a))?);
            }
            &Op::Add(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.clone());
            }
            &Op::Mul(a, b) => {
                accumulate(grads, a, ops::mul(g, v(b))?);
                accumulate(grads, b, ops::mul(g, v(a))?);
            }
            &Op::AddRow(x, row) => {
                accumulate(grads, x, g.clone());
                accumulate(grads, row, column_sums(g));
            }
            &Op::Scale(x, s) => accumulate(grads, x, ops::scale(g, s)),
            &Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yy, gg)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yy * (gg - dot);
                    }
                }
                accumulate(grads, x, gx);
            }
            &Op::LayerNorm { x, gain, bias, eps } => {
                let (xm, gm) = (v(x), v(gain).as_slice());
                let n = xm.cols() as f64;
                let mut gx = Matrix::zeros(xm.rows(), xm.cols());
                let mut ggain = Matrix::zeros(1, xm.cols());
                let mut gbias = Matrix::zeros(1, xm.cols());
                let mut xhat = vec![0.0; xm.cols()];
                let mut dxhat = vec![0.0; xm.cols()];
                for r in 0..xm.rows() {
                    let (mean, inv) = ops::row_moments(xm.row(r), eps);
                    let gr = g.row(r);
                    for j in 0..xm.cols() {
                        xhat[j] = (xm.get(r, j) - mean) * inv;
                        dxhat[j] = gr[j] * gm[j];
                        ggain.as_mut_slice()[j] += gr[j] * xhat[j];
                        gbias.as_mut_slice()[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                accumulate(grads, x, gx);
                accumulate(grads, gain, ggain);
                accumulate(grads, bias, gbias);
            }
            &Op::Gelu(x) => {
                let mut d = ops::gelu_derivative(v(x));
                if let Some(Fault::GeluBackward(f)) = self.fault {
                    d = ops::scale(&d, f);
                }
                for (a, b) in d.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a *= b;
                }
                accumulate(grads, x, d);
            }
            &Op::SliceCols { x, start } => {
                let src = v(x);
                let mut gx = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = v(p).cols();
                    accumulate(grads, p, ops::slice_cols(g, off, w)?);
                    off += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let src = v(*x);
                let mut gx = Matrix::zeros(src.rows(), src.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, gg) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += gg;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ScatterRows { x, idx } => {
                accumulate(grads, *x, ops::gather_rows(g, idx)?);
            }
            &Op::Column { x, j } => {
                let src = v(x);
                let mut gx = Matrix::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    gx.set(r, j, g.get(r, 0));
                }
                accumulate(grads, x, gx);
            }
            &Op::ScaleRows { x, s } => {
                let (xm, sm) = (v(x), v(s));
                accumulate(grads, x, ops::scale_rows(g, sm)?);
                let gs = Matrix::from_fn(xm.rows(), 1, |r, _| {
                    g.row(r).iter().zip(xm.row(r)).map(|(a, b)| a * b).sum()
                });
                accumulate(grads, s, gs);
            }
            &Op::MeanRows(x) => {
                let src = v(x);
                let n = src.rows() as f64;
                let gx = Matrix::from_fn(src.rows(), src.cols(), |_, c| g.get(0, c) / n);
                accumulate(grads, x, gx);
            }
            &Op::SumAll(x) => {
                let src = v(x);
                accumulate(grads, x, Matrix::filled(src.rows(), src.cols(), g.get(0, 0)));
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for row in g.iter_rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
    params: HashMap<String, usize>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a taped value; zero if the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Gradient w.r.t. a named parameter. Errors if the parameter never
    /// entered the forward pass.
    pub fn get(&self, name: &str) -> Result<Matrix> {
        self.params
            .get(name)
            .map(|&id| self.wrt(Var(id)))
            .ok_or_else(|| HsqError::MissingGradient(name.to_string()))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Node ids in the order the backward sweep processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl Backend for Tape {
    type T = Var;

    fn value<'a>(&'a self, t: &'a Var) -> &'a Matrix {
        self.val(*t)
    }

    fn constant(&mut self, m: Matrix) -> Var {
        self.input(m)
    }

    fn param(&mut self, p: &Param) -> Var {
        if let Some(&id) = self.params.get(p.name()) {
            return Var(id);
        }
        let v = self.push(p.shared(), Op::Leaf);
        self.params.insert(p.name().to_string(), v.0);
        v
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let m = ops::matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(Arc::new(m), Op::MatMul(a.0, b.0)))
    }

    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let m = ops::matmul_nt(self.val(*a), self.val(*b))?;
        Ok(self.push(Arc::new(m), Op::MatMulNt(a.0, b.0)))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let m = ops::add(self.val(*a), self.val(*b))?;
        Ok(self.push(Arc::new(m), Op::Add(a.0, b.0)))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let m = ops::mul(self.val(*a), self.val(*b))?;
        Ok(self.push(Arc::new(m), Op::Mul(a.0, b.0)))
    }

    fn add_row(&mut self, x: &Var, row: &Var) -> Result<Var> {
        let m = ops::add_row(self.val(*x), self.val(*row))?;
        Ok(self.push(Arc::new(m), Op::AddRow(x.0, row.0)))
    }

    fn scale(&mut self, x: &Var, s: f64) -> Var {
        let m = ops::scale(self.val(*x), s);
        self.push(Arc::new(m), Op::Scale(x.0, s))
    }

    fn softmax_rows(&mut self, x: &Var) -> Result<Var> {
        let m = ops::softmax_rows(self.val(*x))?;
        Ok(self.push(Arc::new(m), Op::Softmax(x.0)))
    }

    fn masked_softmax_rows(&mut self, x: &Var, selection: &[Vec<usize>]) -> Result<Var> {
        // Dropped entries are exactly zero, so the softmax Jacobian-vector
        // product built from the output already vanishes on them.
        let m = ops::masked_softmax_rows(self.val(*x), selection)?;
        Ok(self.push(Arc::new(m), Op::Softmax(x.0)))
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        let m = ops::layer_norm(self.val(*x), self.val(*gain), self.val(*bias), eps)?;
        Ok(self.push(
            Arc::new(m),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps,
            },
        ))
    }

    fn gelu(&mut self, x: &Var) -> Var {
        let m = ops::gelu(self.val(*x));
        self.push(Arc::new(m), Op::Gelu(x.0))
    }

    fn slice_cols(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let m = ops::slice_cols(self.val(*x), start, len)?;
        Ok(self.push(Arc::new(m), Op::SliceCols { x: x.0, start }))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Matrix> = parts.iter().map(|p| self.val(*p)).collect();
        let m = ops::concat_cols(&refs)?;
        Ok(self.push(
            Arc::new(m),
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
        ))
    }

    fn gather_rows(&mut self, x: &Var, idx: &[usize]) -> Result<Var> {
        let m = ops::gather_rows(self.val(*x), idx)?;
        Ok(self.push(
            Arc::new(m),
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
        ))
    }

    fn scatter_rows(&mut self, x: &Var, idx: &[usize], rows: usize) -> Result<Var> {
        let m = ops::scatter_rows(self.val(*x), idx, rows)?;
        Ok(self.push(
            Arc::new(m),
            Op::ScatterRows {
                x: x.0,
                idx: idx.to_vec(),
            },
        ))
    }

    fn column(&mut self, x: &Var, j: usize) -> Result<Var> {
        let m = ops::column(self.val(*x), j)?;
        Ok(self.push(Arc::new(m), Op::Column { x: x.0, j }))
    }

    fn scale_rows(&mut self, x: &Var, s: &Var) -> Result<Var> {
        let m = ops::scale_rows(self.val(*x), self.val(*s))?;
        Ok(self.push(Arc::new(m), Op::ScaleRows { x: x.0, s: s.0 }))
    }

    fn mean_rows(&mut self, x: &Var) -> Result<Var> {
        let m = ops::mean_rows(self.val(*x))?;
        Ok(self.push(Arc::new(m), Op::MeanRows(x.0)))
    }

    fn sum_all(&mut self, x: &Var) -> Var {
        let m = ops::sum_all(self.val(*x));
        self.push(Arc::new(m), Op::SumAll(x.0))
    }
}
