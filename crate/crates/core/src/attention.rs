//! Multi-head scaled dot-product attention.
//!
//! Queries come from the source sequence and keys/values from the target
//! sequence; self-attention is the case where both are the same matrix. Keys
//! are visited in a canonical (lexicographic) row order, which makes the
//! result bitwise independent of how the target rows are ordered.

use crate::error::{contract, Result};
use crate::numerics::ops::canonical_row_order;
use crate::numerics::rng::Init;
use crate::numerics::{Backend, Eval, Matrix, Module, Param};

/// Heads used for a model width when none is configured: one per 64 columns.
pub fn default_heads(dim: usize) -> usize {
    (dim / 64).max(1)
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: Param,
    pub w_k: Param,
    pub w_v: Param,
    pub w_o: Param,
    heads: usize,
}

impl AttentionParams {
    pub fn new(prefix: &str, dim: usize, heads: usize, init: &mut Init) -> Result<Self> {
        let mut mk = |n: &str| Param::new(format!("{prefix}.{n}"), init.trunc_normal(dim, dim));
        let (w_q, w_k, w_v, w_o) = (mk("w_q"), mk("w_k"), mk("w_v"), mk("w_o"));
        Self::from_weights(w_q, w_k, w_v, w_o, heads)
    }

    pub fn from_weights(w_q: Param, w_k: Param, w_v: Param, w_o: Param, heads: usize) -> Result<Self> {
        let dim = w_q.value().rows();
        for p in [&w_q, &w_k, &w_v, &w_o] {
            if p.value().shape() != (dim, dim) {
                return Err(contract(format!(
                    "attention projection `{}` must be {dim}x{dim}",
                    p.name()
                )));
            }
        }
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(contract(format!(
                "model dimension {dim} is not divisible into {heads} heads"
            )));
        }
        Ok(Self { w_q, w_k, w_v, w_o, heads })
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.value().rows()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.heads
    }

    pub fn zero_output(&mut self) {
        let d = self.model_dim();
        self.w_o.set(Matrix::zeros(d, d));
    }

    fn check(&self, x: &Matrix, role: &str) -> Result<()> {
        if x.cols() != self.model_dim() {
            return Err(contract(format!(
                "attention {role} has {} columns, model dimension is {}",
                x.cols(),
                self.model_dim()
            )));
        }
        if x.rows() == 0 {
            return Err(contract(format!("attention {role} has no rows")));
        }
        Ok(())
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x_src: &B::T, x_tgt: &B::T) -> Result<B::T> {
        self.check(b.value(x_src), "source")?;
        self.check(b.value(x_tgt), "target")?;
        let order = canonical_row_order(b.value(x_tgt));
        let keys = if order.iter().enumerate().all(|(i, &j)| i == j) {
            x_tgt.clone()
        } else {
            b.gather_rows(x_tgt, &order)?
        };

        let (wq, wk, wv, wo) = (
            b.param(&self.w_q),
            b.param(&self.w_k),
            b.param(&self.w_v),
            b.param(&self.w_o),
        );
        let q = b.matmul(x_src, &wq)?;
        let k = b.matmul(&keys, &wk)?;
        let v = b.matmul(&keys, &wv)?;

        let hd = self.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q.clone(), k.clone(), v.clone())
            } else {
                (
                    b.slice_cols(&q, h * hd, hd)?,
                    b.slice_cols(&k, h * hd, hd)?,
                    b.slice_cols(&v, h * hd, hd)?,
                )
            };
            let scores = b.matmul_nt(&qh, &kh)?;
            let scores = b.scale(&scores, inv_sqrt);
            let weights = b.softmax_rows(&scores)?;
            heads.push(b.matmul(&weights, &vh)?);
        }
        let merged = if heads.len() == 1 {
            heads.pop().expect("one head")
        } else {
            b.concat_cols(&heads)?
        };
        b.matmul(&merged, &wo)
    }

    /// Per-head attention weights (`M × N`, columns in the caller's target
    /// row order).
    pub fn attention_weights(&self, x_src: &Matrix, x_tgt: &Matrix) -> Result<Vec<Matrix>> {
        use crate::numerics::ops;
        self.check(x_src, "source")?;
        self.check(x_tgt, "target")?;
        let q = ops::matmul(x_src, self.w_q.value())?;
        let k = ops::matmul(x_tgt, self.w_k.value())?;
        let hd = self.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        (0..self.heads)
            .map(|h| {
                let qh = ops::slice_cols(&q, h * hd, hd)?;
                let kh = ops::slice_cols(&k, h * hd, hd)?;
                ops::softmax_rows(&ops::scale(&ops::matmul_nt(&qh, &kh)?, inv_sqrt))
            })
            .collect()
    }
}

impl Module for AttentionParams {
    fn params(&self) -> Vec<&Param> {
        vec![&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }
}

pub fn self_attention(x: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    cross_attention(x, x, p)
}

pub fn cross_attention(x_src: &Matrix, x_tgt: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    let mut e = Eval;
    let s = e.constant(x_src.clone());
    let t = e.constant(x_tgt.clone());
    Ok(p.forward(&mut e, &s, &t)?.as_ref().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{normal_matrix, rng_for};
    use crate::numerics::{finite_diff_entries, max_relative_error, Tape};

    fn params(dim: usize, heads: usize, seed: u64) -> AttentionParams {
        let mut init = Init::new(seed, 0.5);
        AttentionParams::new("attn", dim, heads, &mut init).unwrap()
    }

    /// Scalar-loop evaluation of multi-head attention straight from the
    /// definition; shares no code with the backend path.
    fn brute_force(x_src: &Matrix, x_tgt: &Matrix, p: &AttentionParams) -> Matrix {
        let d = p.model_dim();
        let hd = p.head_dim();
        let proj = |x: &Matrix, w: &Matrix| {
            Matrix::from_fn(x.rows(), d, |r, c| (0..d).map(|t| x.get(r, t) * w.get(t, c)).sum())
        };
        let q = proj(x_src, p.w_q.value());
        let k = proj(x_tgt, p.w_k.value());
        let v = proj(x_tgt, p.w_v.value());
        let mut concat = Matrix::zeros(x_src.rows(), d);
        for h in 0..p.heads() {
            for i in 0..x_src.rows() {
                let scores: Vec<f64> = (0..x_tgt.rows())
                    .map(|j| {
                        (0..hd).map(|t| q.get(i, h * hd + t) * k.get(j, h * hd + t)).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for t in 0..hd {
                    let val: f64 = (0..x_tgt.rows())
                        .map(|j| scores[j].exp() / z * v.get(j, h * hd + t))
                        .sum();
                    concat.set(i, h * hd + t, val);
                }
            }
        }
        proj(&concat, p.w_o.value())
    }

    #[test]
    fn default_head_counts() {
        assert_eq!(default_heads(384), 6);
        assert_eq!(default_heads(768), 12);
        assert_eq!(default_heads(8), 1);
        assert_eq!(default_heads(96), 1);
    }

    #[test]
    fn rejects_indivisible_heads_and_bad_inputs() {
        let mut init = Init::new(0, 0.02);
        assert!(AttentionParams::new("a", 10, 3, &mut init).is_err());
        let p = params(4, 1, 0);
        assert!(self_attention(&Matrix::zeros(2, 5), &p).is_err());
        assert!(cross_attention(&Matrix::zeros(2, 4), &Matrix::zeros(3, 3), &p).is_err());
    }

    #[test]
    fn single_token_passes_value_projection() {
        let p = params(4, 2, 1);
        let x = Matrix::from_rows(&[[0.3, -1.2, 0.8, 2.0]]);
        let expected = crate::numerics::matmul(
            &crate::numerics::matmul(&x, p.w_v.value()).unwrap(),
            p.w_o.value(),
        )
        .unwrap();
        assert!(self_attention(&x, &p).unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn single_target_row_broadcasts() {
        let p = params(4, 2, 2);
        let src = normal_matrix(&mut rng_for(3), 5, 4, 1.0);
        let tgt = Matrix::from_rows(&[[1.0, 0.5, -0.5, 0.25]]);
        let expected = crate::numerics::matmul(
            &crate::numerics::matmul(&tgt, p.w_v.value()).unwrap(),
            p.w_o.value(),
        )
        .unwrap();
        let out = cross_attention(&src, &tgt, &p).unwrap();
        for r in 0..5 {
            for c in 0..4 {
                assert!((out.get(r, c) - expected.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let p = params(8, 2, 4);
        let row = [0.1, -0.3, 0.7, 1.1, -0.2, 0.0, 0.5, -1.0];
        let x = Matrix::from_rows(&[row, row, row]);
        let out = self_attention(&x, &p).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(1), out.row(2));
    }

    #[test]
    fn matches_brute_force_derivation() {
        let p = params(4, 1, 5);
        let x = Matrix::from_rows(&[[0.5, -0.25, 1.0, 0.0], [-1.0, 0.75, 0.5, 0.25]]);
        let out = self_attention(&x, &p).unwrap();
        assert!(out.max_abs_diff(&brute_force(&x, &x, &p)) < 1e-12);

        let p = params(4, 2, 6);
        let src = normal_matrix(&mut rng_for(7), 2, 4, 1.0);
        let tgt = normal_matrix(&mut rng_for(8), 3, 4, 1.0);
        let out = cross_attention(&src, &tgt, &p).unwrap();
        assert_eq!(out.shape(), (2, 4));
        assert!(out.max_abs_diff(&brute_force(&src, &tgt, &p)) < 1e-12);
    }

    #[test]
    fn weights_are_row_stochastic() {
        let p = params(16, 4, 9);
        let src = normal_matrix(&mut rng_for(10), 6, 16, 3.0);
        let tgt = normal_matrix(&mut rng_for(11), 9, 16, 3.0);
        for w in p.attention_weights(&src, &tgt).unwrap() {
            for row in w.iter_rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn target_order_does_not_matter_bitwise() {
        let p = params(8, 2, 12);
        let src = normal_matrix(&mut rng_for(13), 4, 8, 1.0);
        let tgt = normal_matrix(&mut rng_for(14), 7, 8, 1.0);
        let perm = [3, 6, 0, 5, 1, 4, 2];
        let shuffled = crate::numerics::ops::gather_rows(&tgt, &perm).unwrap();
        assert_eq!(
            cross_attention(&src, &tgt, &p).unwrap(),
            cross_attention(&src, &shuffled, &p).unwrap()
        );
    }

    #[test]
    fn source_rows_are_local() {
        let p = params(8, 2, 15);
        let src = normal_matrix(&mut rng_for(16), 4, 8, 1.0);
        let tgt = normal_matrix(&mut rng_for(17), 5, 8, 1.0);
        let base = cross_attention(&src, &tgt, &p).unwrap();
        let mut bumped = src.clone();
        bumped.set(2, 3, bumped.get(2, 3) + 0.5);
        let out = cross_attention(&bumped, &tgt, &p).unwrap();
        for r in 0..4 {
            assert_eq!(out.row(r) == base.row(r), r != 2, "row {r}");
        }
        let mut tgt2 = tgt.clone();
        tgt2.set(0, 0, tgt2.get(0, 0) + 0.5);
        let out = cross_attention(&src, &tgt2, &p).unwrap();
        assert!((0..4).all(|r| out.row(r) != base.row(r)));
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let p = params(8, 2, 18);
        let src = normal_matrix(&mut rng_for(19), 3, 8, 1.0);
        let tgt = normal_matrix(&mut rng_for(20), 5, 8, 1.0);
        let loss_of = |p: &AttentionParams| -> f64 {
            let out = cross_attention(&src, &tgt, p).unwrap();
            out.as_slice().iter().enumerate().map(|(i, v)| v * ((i % 5) as f64 - 2.0)).sum()
        };
        let mut tape = Tape::new();
        let s = tape.input(src.clone());
        let t = tape.input(tgt.clone());
        let out = p.forward(&mut tape, &s, &t).unwrap();
        let w = tape.constant(Matrix::from_fn(3, 8, |r, c| ((r * 8 + c) % 5) as f64 - 2.0));
        let weighted = tape.mul(&out, &w).unwrap();
        let loss = tape.sum_all(&weighted);
        let grads = tape.backward(loss).unwrap();
        for i in 0..4 {
            let name = p.params()[i].name().to_string();
            let analytic = grads.get(&name).unwrap();
            let all: Vec<usize> = (0..64).collect();
            let numeric = finite_diff_entries(
                |m| {
                    let mut q = p.clone();
                    q.params_mut()[i].set(m.clone());
                    loss_of(&q)
                },
                p.params()[i].value(),
                1e-5,
                &all,
            );
            let err = max_relative_error(analytic.as_slice(), &numeric);
            assert!(err < 1e-4, "{name}: {err:e}");
        }
    }
}
