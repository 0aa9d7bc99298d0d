//! Incremental decoding for many trajectories that share one context.
//!
//! The context is run once through the full forward pass; its rotated keys
//! and values are shared by every trajectory. Each decoding step then feeds
//! one new token per trajectory, attending over the shared prefix with a
//! single matrix product and over the trajectory's own suffix directly.

use ndarray::{s, Array2, Array3, Axis, Zip};

use super::forward::{check_tokens, forward_with_cache};
use super::ops::{gelu, layer_norm, RotaryTable};
use super::Parameters;
use crate::error::{Error, Result};
use crate::Scalar;

pub struct Decoder<'a, T> {
    params: &'a Parameters<T>,
    rotary: RotaryTable<T>,
}

/// Key/value caches of a batch of trajectories.
pub struct DecodeState<T> {
    prefix_len: usize,
    prefix_k: Vec<Array2<T>>,
    prefix_v: Vec<Array2<T>>,
    suffix_k: Vec<Array3<T>>,
    suffix_v: Vec<Array3<T>>,
    suffix_len: usize,
    /// `batch × vocab` logits for the next token of every trajectory.
    pub logits: Array2<T>,
}

impl<T> DecodeState<T> {
    pub fn batch(&self) -> usize {
        self.logits.nrows()
    }

    /// Tokens consumed so far, prefix included.
    pub fn position(&self) -> usize {
        self.prefix_len + self.suffix_len
    }
}

impl<'a, T: Scalar> Decoder<'a, T> {
    pub fn new(params: &'a Parameters<T>) -> Self {
        let cfg = &params.config;
        Self { params, rotary: RotaryTable::new(cfg.max_seq_len, cfg.d_head()) }
    }

    /// Runs the shared `prefix` and prepares room for `capacity` further
    /// tokens in each of `batch` trajectories.
    pub fn prefill(&self, prefix: &[usize], batch: usize, capacity: usize) -> Result<DecodeState<T>> {
        check_tokens(self.params, prefix)?;
        let cfg = &self.params.config;
        if prefix.len() + capacity > cfg.max_seq_len {
            return Err(Error::SequenceTooLong { len: prefix.len() + capacity, max: cfg.max_seq_len });
        }
        let cache = forward_with_cache(self.params, prefix, None)?;
        let last = cache.logits.row(prefix.len() - 1);
        let logits = Array2::from_shape_fn((batch, cfg.vocab_size), |(_, j)| last[j]);
        let (prefix_k, prefix_v) = cache.layers.into_iter().map(|lc| (lc.k, lc.v)).unzip();
        let suffix = || (0..cfg.n_layers).map(|_| Array3::zeros((batch, capacity, cfg.d_model))).collect();
        Ok(DecodeState {
            prefix_len: prefix.len(),
            prefix_k,
            prefix_v,
            suffix_k: suffix(),
            suffix_v: suffix(),
            suffix_len: 0,
            logits,
        })
    }

    /// Feeds `tokens[b]` to trajectory `b` and refreshes `state.logits`.
    pub fn step(&self, state: &mut DecodeState<T>, tokens: &[usize]) -> Result<()> {
        let cfg = &self.params.config;
        let batch = state.batch();
        if tokens.len() != batch {
            return Err(Error::LengthMismatch { expected: batch, actual: tokens.len() });
        }
        let capacity = state.suffix_k.first().map_or(0, |a| a.dim().1);
        if state.suffix_len >= capacity {
            return Err(Error::SequenceTooLong { len: state.position() + 1, max: state.prefix_len + capacity });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange { token: t, base: cfg.vocab_size });
        }
        let pos = state.position();
        let slot = state.suffix_len;
        let (d, n_heads) = (cfg.d_model, cfg.n_heads);
        let dh = cfg.d_head();
        let scale = T::lit(1.0 / (dh as f64).sqrt());

        let rows: Vec<usize> = tokens.iter().map(|&t| cfg.embedding_row(t, pos)).collect();
        let mut x = self.params.embedding.select(Axis(0), &rows);

        for (l, layer) in self.params.layers.iter().enumerate() {
            let (h, _) = layer_norm(x.view(), &layer.attn_norm);
            let mut q = h.dot(&layer.query.weight) + &layer.query.bias;
            let mut k = h.dot(&layer.key.weight) + &layer.key.bias;
            let v = h.dot(&layer.value.weight) + &layer.value.bias;
            self.rotary.rotate(q.view_mut(), n_heads, |_| pos, false);
            self.rotary.rotate(k.view_mut(), n_heads, |_| pos, false);
            state.suffix_k[l].slice_mut(s![.., slot, ..]).assign(&k);
            state.suffix_v[l].slice_mut(s![.., slot, ..]).assign(&v);

            let suf_k = state.suffix_k[l].slice(s![.., ..=slot, ..]);
            let suf_v = state.suffix_v[l].slice(s![.., ..=slot, ..]);
            let mut ctx = Array2::<T>::zeros((batch, d));
            for hd in 0..n_heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let qh = q.slice(cols);
                let mut pre = qh.dot(&state.prefix_k[l].slice(cols).t());
                let pre_v = state.prefix_v[l].slice(cols);
                let mut out = ctx.slice_mut(cols);
                for b in 0..batch {
                    let qb = qh.row(b);
                    let kb = suf_k.index_axis(Axis(0), b);
                    let vb = suf_v.index_axis(Axis(0), b);
                    let mut own: Vec<T> = (0..=slot)
                        .map(|j| {
                            let kj = kb.slice(s![j, hd * dh..(hd + 1) * dh]);
                            qb.dot(&kj)
                        })
                        .collect();
                    let mut pre_row = pre.row_mut(b);
                    let max = pre_row.iter().chain(own.iter()).copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for v in pre_row.iter_mut().chain(own.iter_mut()) {
                        *v = ((*v - max) * scale).exp();
                        sum += *v;
                    }
                    let inv = T::one() / sum;
                    pre_row.iter_mut().for_each(|v| *v *= inv);
                    let mut ob = out.row_mut(b);
                    for (j, w) in own.iter().enumerate() {
                        let vj = vb.slice(s![j, hd * dh..(hd + 1) * dh]);
                        Zip::from(&mut ob).and(&vj).for_each(|o, &val| *o += *w * inv * val);
                    }
                }
                out += &pre.dot(&pre_v);
            }
            let attn_out = ctx.dot(&layer.output.weight) + &layer.output.bias;
            let x_mid = &x + &attn_out;
            let (h2, _) = layer_norm(x_mid.view(), &layer.ff_norm);
            let act = (h2.dot(&layer.ff_in.weight) + &layer.ff_in.bias).mapv(gelu);
            x = x_mid + act.dot(&layer.ff_out.weight) + &layer.ff_out.bias;
        }
        let (hidden, _) = layer_norm(x.view(), &self.params.final_norm);
        state.logits = hidden.dot(&self.params.head.weight) + &self.params.head.bias;
        state.suffix_len += 1;
        Ok(())
    }
}
