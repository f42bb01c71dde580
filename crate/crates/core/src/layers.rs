use crate::error::{contract, Result};
use crate::numerics::rng::Init;
use crate::numerics::{Backend, Matrix, Module, Param, LAYER_NORM_EPS};

/// Affine map `x·W + b` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(prefix: &str, inputs: usize, outputs: usize, init: &mut Init) -> Self {
        Self {
            weight: Param::new(format!("{prefix}.weight"), init.trunc_normal(inputs, outputs)),
            bias: Param::new(format!("{prefix}.bias"), Matrix::zeros(1, outputs)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value().rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value().cols()
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::T) -> Result<B::T> {
        if b.value(x).cols() != self.inputs() {
            return Err(contract(format!(
                "linear `{}` expects {} input columns, got {}",
                self.weight.name(),
                self.inputs(),
                b.value(x).cols()
            )));
        }
        let w = b.param(&self.weight);
        let bias = b.param(&self.bias);
        let y = b.matmul(x, &w)?;
        b.add_row(&y, &bias)
    }

    pub fn zero(&mut self) {
        let (i, o) = (self.inputs(), self.outputs());
        self.weight.set(Matrix::zeros(i, o));
        self.bias.set(Matrix::zeros(1, o));
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self::with_eps(prefix, dim, LAYER_NORM_EPS)
    }

    pub fn with_eps(prefix: &str, dim: usize, eps: f64) -> Self {
        Self {
            gain: Param::new(format!("{prefix}.gain"), Matrix::filled(1, dim, 1.0)),
            bias: Param::new(format!("{prefix}.bias"), Matrix::zeros(1, dim)),
            eps,
        }
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::T) -> Result<B::T> {
        let g = b.param(&self.gain);
        let bias = b.param(&self.bias);
        b.layer_norm(x, &g, &bias, self.eps)
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gain, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.bias]
    }
}
