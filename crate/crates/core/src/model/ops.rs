use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};

use super::LayerNorm;
use crate::Scalar;

pub const LN_EPS: f64 = 1e-5;
pub const ROTARY_BASE: f64 = 10000.0;

pub(crate) struct NormCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

pub(crate) fn layer_norm<T: Scalar>(x: ArrayView2<'_, T>, ln: &LayerNorm<T>) -> (Array2<T>, NormCache<T>) {
    let (n, d) = x.dim();
    let inv_d = T::lit(1.0 / d as f64);
    let eps = T::lit(LN_EPS);
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    for ((row, mut out), r) in x.outer_iter().zip(xhat.outer_iter_mut()).zip(rstd.iter_mut()) {
        let mean = row.sum() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).fold(T::zero(), |a, b| a + b) * inv_d;
        let inv = T::one() / (var + eps).sqrt();
        Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * inv);
        *r = inv;
    }
    let y = &xhat * &ln.gain + &ln.bias;
    (y, NormCache { xhat, rstd })
}

/// Returns `dL/dx` and accumulates gain/bias gradients into `grad`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: ArrayView2<'_, T>,
    cache: &NormCache<T>,
    ln: &LayerNorm<T>,
    grad: &mut LayerNorm<T>,
) -> Array2<T> {
    let d = dy.ncols();
    let inv_d = T::lit(1.0 / d as f64);
    grad.bias += &dy.sum_axis(Axis(0));
    grad.gain += &(&dy * &cache.xhat).sum_axis(Axis(0));
    let dxhat = &dy * &ln.gain;
    let mut dx = Array2::zeros(dy.dim());
    for (((g, xh), mut out), &r) in dxhat
        .outer_iter()
        .zip(cache.xhat.outer_iter())
        .zip(dx.outer_iter_mut())
        .zip(cache.rstd.iter())
    {
        let mean_g = g.sum() * inv_d;
        let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).fold(T::zero(), |a, b| a + b) * inv_d;
        Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| *o = r * (gi - mean_g - xi * mean_gx));
    }
    dx
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Numerically stable softmax of a vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row `i` of `scores` (a block of rows starting at absolute row
/// `row_offset`) becomes the softmax of `scale · scores[i, ..=row_offset+i]`;
/// entries beyond the diagonal are zeroed.
pub(crate) fn causal_softmax_rows<T: Scalar>(mut scores: ArrayViewMut2<'_, T>, scale: T, row_offset: usize) {
    for (i, mut row) in scores.outer_iter_mut().enumerate() {
        let limit = (row_offset + i + 1).min(row.len());
        let slice = row.as_slice_mut().expect("score rows are contiguous");
        let (visible, masked) = slice.split_at_mut(limit);
        let max = visible.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in visible.iter_mut() {
            *v = ((*v - max) * scale).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        visible.iter_mut().for_each(|v| *v *= inv);
        masked.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Cosine/sine tables for rotating dimension pairs `(2i, 2i+1)` of each head
/// by `m · base^(-2i/d_head)` at position `m`.
#[derive(Debug, Clone)]
pub struct RotaryTable<T> {
    cos: Array2<T>,
    sin: Array2<T>,
}

impl<T: Scalar> RotaryTable<T> {
    pub fn new(max_len: usize, d_head: usize) -> Self {
        let half = d_head / 2;
        let mut cos = Array2::zeros((max_len, half));
        let mut sin = Array2::zeros((max_len, half));
        for m in 0..max_len {
            for i in 0..half {
                let theta = ROTARY_BASE.powf(-2.0 * i as f64 / d_head as f64);
                let angle = m as f64 * theta;
                cos[[m, i]] = T::lit(angle.cos());
                sin[[m, i]] = T::lit(angle.sin());
            }
        }
        Self { cos, sin }
    }

    pub fn len(&self) -> usize {
        self.cos.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.cos.nrows() == 0
    }

    /// Rotates row `r` of `x` (`n × n_heads·d_head`) as position
    /// `positions(r)`. `inverse` applies the transpose rotation, which is
    /// also the gradient map.
    pub(crate) fn rotate(&self, mut x: ArrayViewMut2<'_, T>, n_heads: usize, position: impl Fn(usize) -> usize, inverse: bool) {
        let d_head = x.ncols() / n_heads;
        let half = d_head / 2;
        for (r, mut row) in x.outer_iter_mut().enumerate() {
            let m = position(r);
            let cos = self.cos.row(m);
            let sin = self.sin.row(m);
            for h in 0..n_heads {
                let base = h * d_head;
                for i in 0..half {
                    let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                    let a = row[base + 2 * i];
                    let b = row[base + 2 * i + 1];
                    row[base + 2 * i] = a * c - b * s;
                    row[base + 2 * i + 1] = a * s + b * c;
                }
            }
        }
    }
}

/// Rotary encoding of a single-head block `q_or_k` (`seq × d_head`) at the
/// given positions.
pub fn rotary_apply<T: Scalar>(q_or_k: ArrayView2<'_, T>, positions: &[usize]) -> Array2<T> {
    let max = positions.iter().copied().max().map_or(0, |m| m + 1);
    let table = RotaryTable::new(max, q_or_k.ncols());
    let mut out = q_or_k.to_owned();
    table.rotate(out.view_mut(), 1, |r| positions[r], false);
    out
}
