use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore};

use super::ops::{causal_softmax_rows, gelu, gelu_grad, layer_norm, layer_norm_backward, softmax, NormCache, RotaryTable};
use super::{DecoderLayer, Linear, Parameters, PAD_TOKEN};
use crate::error::{Error, Result};
use crate::Scalar;

/// Query rows processed together; keys beyond a block's last row are never
/// touched, which roughly halves causal attention cost.
const ATTN_BLOCK: usize = 64;

pub(crate) struct LayerCache<T> {
    attn_norm: NormCache<T>,
    h_attn: Array2<T>,
    /// Rotated queries and keys.
    pub(crate) q: Array2<T>,
    pub(crate) k: Array2<T>,
    pub(crate) v: Array2<T>,
    /// Attention probabilities per head (before dropout), zero above the diagonal.
    pub(crate) probs: Vec<Array2<T>>,
    prob_masks: Option<Vec<Array2<T>>>,
    ctx: Array2<T>,
    attn_out_mask: Option<Array2<T>>,
    ff_norm: NormCache<T>,
    h_ff: Array2<T>,
    ff_pre: Array2<T>,
    ff_act: Array2<T>,
    ff_out_mask: Option<Array2<T>>,
}

/// Activations of one sequence kept for the backward pass.
pub struct ForwardCache<T> {
    rows: Vec<usize>,
    pub(crate) layers: Vec<LayerCache<T>>,
    final_norm: NormCache<T>,
    final_hidden: Array2<T>,
    /// `seq × vocab`; row `k` scores the token following input position `k`.
    pub logits: Array2<T>,
}

fn linear<T: Scalar>(x: ArrayView2<'_, T>, lin: &Linear<T>) -> Array2<T> {
    x.dot(&lin.weight) + &lin.bias
}

/// Accumulates weight/bias gradients and returns the input gradient.
fn linear_backward<T: Scalar>(x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>, lin: &Linear<T>, grad: &mut Linear<T>) -> Array2<T> {
    general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut grad.weight);
    grad.bias += &dy.sum_axis(Axis(0));
    dy.dot(&lin.weight.t())
}

fn dropout_mask<T: Scalar>(shape: (usize, usize), rate: f64, rng: &mut dyn RngCore) -> Array2<T> {
    let keep = 1.0 - rate;
    let scale = T::lit(1.0 / keep);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < keep { scale } else { T::zero() })
}

pub(crate) fn check_tokens<T: Scalar>(params: &Parameters<T>, tokens: &[usize]) -> Result<()> {
    let cfg = &params.config;
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: tokens.len(), max: cfg.max_seq_len });
    }
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange { token: t, base: cfg.vocab_size });
    }
    Ok(())
}

/// Runs the network on `tokens` and keeps every activation needed by
/// [`backward`]. Dropout is active only when `dropout_rng` is given.
pub fn forward_with_cache<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[usize],
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<ForwardCache<T>> {
    check_tokens(params, tokens)?;
    let cfg = &params.config;
    let rows: Vec<usize> = tokens.iter().enumerate().map(|(pos, &t)| cfg.embedding_row(t, pos)).collect();
    let mut x = params.embedding.select(Axis(0), &rows);
    let rotary = RotaryTable::new(tokens.len(), cfg.d_head());
    let rate = if dropout_rng.is_some() { cfg.dropout } else { 0.0 };

    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let rng: Option<&mut dyn RngCore> = match dropout_rng.as_mut() {
            Some(r) if rate > 0.0 => Some(&mut **r),
            _ => None,
        };
        let (out, cache) = layer_forward(layer, cfg.n_heads, &rotary, x, rate, rng);
        layers.push(cache);
        x = out;
    }
    let (final_hidden, final_norm) = layer_norm(x.view(), &params.final_norm);
    let logits = linear(final_hidden.view(), &params.head);
    Ok(ForwardCache { rows, layers, final_norm, final_hidden, logits })
}

fn layer_forward<T: Scalar>(
    layer: &DecoderLayer<T>,
    n_heads: usize,
    rotary: &RotaryTable<T>,
    x_in: Array2<T>,
    rate: f64,
    mut rng: Option<&mut dyn RngCore>,
) -> (Array2<T>, LayerCache<T>) {
    let (n, d) = x_in.dim();
    let dh = d / n_heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());

    let (h_attn, attn_norm) = layer_norm(x_in.view(), &layer.attn_norm);
    let mut q = linear(h_attn.view(), &layer.query);
    let mut k = linear(h_attn.view(), &layer.key);
    let v = linear(h_attn.view(), &layer.value);
    rotary.rotate(q.view_mut(), n_heads, |r| r, false);
    rotary.rotate(k.view_mut(), n_heads, |r| r, false);

    let mut ctx = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(n_heads);
    let mut prob_masks = rng.as_ref().map(|_| Vec::with_capacity(n_heads));
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
        let mut p = Array2::zeros((n, n));
        let mask = rng.as_deref_mut().map(|r| dropout_mask::<T>((n, n), rate, r));
        let mut out = ctx.slice_mut(cols);
        for r0 in (0..n).step_by(ATTN_BLOCK) {
            let r1 = (r0 + ATTN_BLOCK).min(n);
            let mut block = p.slice_mut(s![r0..r1, ..r1]);
            general_mat_mul(T::one(), &qh.slice(s![r0..r1, ..]), &kh.slice(s![..r1, ..]).t(), T::zero(), &mut block);
            causal_softmax_rows(block.view_mut(), scale, r0);
            let vis = match &mask {
                Some(m) => &block * &m.slice(s![r0..r1, ..r1]),
                None => block.to_owned(),
            };
            general_mat_mul(T::one(), &vis, &vh.slice(s![..r1, ..]), T::zero(), &mut out.slice_mut(s![r0..r1, ..]));
        }
        probs.push(p);
        if let (Some(masks), Some(m)) = (prob_masks.as_mut(), mask) {
            masks.push(m);
        }
    }

    let mut attn_out = linear(ctx.view(), &layer.output);
    let attn_out_mask = rng.as_deref_mut().map(|r| dropout_mask::<T>((n, d), rate, r));
    if let Some(m) = &attn_out_mask {
        attn_out *= m;
    }
    let x_mid = &x_in + &attn_out;

    let (h_ff, ff_norm) = layer_norm(x_mid.view(), &layer.ff_norm);
    let ff_pre = linear(h_ff.view(), &layer.ff_in);
    let ff_act = ff_pre.mapv(gelu);
    let mut ff_out = linear(ff_act.view(), &layer.ff_out);
    let ff_out_mask = rng.map(|r| dropout_mask::<T>((n, d), rate, r));
    if let Some(m) = &ff_out_mask {
        ff_out *= m;
    }
    let x_out = x_mid + ff_out;

    let cache = LayerCache {
        attn_norm,
        h_attn,
        q,
        k,
        v,
        probs,
        prob_masks,
        ctx,
        attn_out_mask,
        ff_norm,
        h_ff,
        ff_pre,
        ff_act,
        ff_out_mask,
    };
    (x_out, cache)
}

/// Logits for `tokens`, with dropout when `dropout_rng` is given.
pub fn forward<T: Scalar>(params: &Parameters<T>, tokens: &[usize], dropout_rng: Option<&mut dyn RngCore>) -> Result<Array2<T>> {
    Ok(forward_with_cache(params, tokens, dropout_rng)?.logits)
}

/// Deterministic evaluation-mode logits.
pub fn forward_eval<T: Scalar>(params: &Parameters<T>, tokens: &[usize]) -> Result<Array2<T>> {
    forward(params, tokens, None)
}

/// Distribution of the token following `prefix` (evaluation mode). The
/// network input is the prefix shifted right behind a pad token.
pub fn next_token_distribution<T: Scalar>(params: &Parameters<T>, prefix: &[usize]) -> Result<Vec<T>> {
    let mut input = Vec::with_capacity(prefix.len() + 1);
    input.push(PAD_TOKEN);
    input.extend_from_slice(prefix);
    let logits = forward_eval(params, &input)?;
    let last = logits.row(logits.nrows() - 1);
    Ok(softmax(last.as_slice().expect("contiguous logits")))
}

/// Backpropagates `dlogits` through the cached forward pass, adding the
/// parameter gradients into `grads`.
pub fn backward<T: Scalar>(params: &Parameters<T>, cache: &ForwardCache<T>, dlogits: ArrayView2<'_, T>, grads: &mut Parameters<T>) {
    let cfg = &params.config;
    let d_hidden = linear_backward(cache.final_hidden.view(), dlogits, &params.head, &mut grads.head);
    let mut dx = layer_norm_backward(d_hidden.view(), &cache.final_norm, &params.final_norm, &mut grads.final_norm);

    let rotary = RotaryTable::new(dlogits.nrows(), cfg.d_head());
    for ((layer, lc), lg) in params.layers.iter().zip(&cache.layers).zip(grads.layers.iter_mut()).rev() {
        dx = layer_backward(layer, lc, lg, cfg.n_heads, &rotary, dx);
    }

    for (&row, d) in cache.rows.iter().zip(dx.outer_iter()) {
        let mut target = grads.embedding.row_mut(row);
        target += &d;
    }
}

fn layer_backward<T: Scalar>(
    layer: &DecoderLayer<T>,
    lc: &LayerCache<T>,
    lg: &mut DecoderLayer<T>,
    n_heads: usize,
    rotary: &RotaryTable<T>,
    d_out: Array2<T>,
) -> Array2<T> {
    let (n, d) = d_out.dim();
    let dh = d / n_heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());

    // feed-forward branch
    let d_ff_out = match &lc.ff_out_mask {
        Some(m) => &d_out * m,
        None => d_out.clone(),
    };
    let mut d_act = linear_backward(lc.ff_act.view(), d_ff_out.view(), &layer.ff_out, &mut lg.ff_out);
    Zip::from(&mut d_act).and(&lc.ff_pre).for_each(|g, &x| *g *= gelu_grad(x));
    let d_h_ff = linear_backward(lc.h_ff.view(), d_act.view(), &layer.ff_in, &mut lg.ff_in);
    let d_mid = d_out + layer_norm_backward(d_h_ff.view(), &lc.ff_norm, &layer.ff_norm, &mut lg.ff_norm);

    // attention branch
    let d_attn_out = match &lc.attn_out_mask {
        Some(m) => &d_mid * m,
        None => d_mid.clone(),
    };
    let d_ctx = linear_backward(lc.ctx.view(), d_attn_out.view(), &layer.output, &mut lg.output);

    let mut dq = Array2::<T>::zeros((n, d));
    let mut dk = Array2::<T>::zeros((n, d));
    let mut dv = Array2::<T>::zeros((n, d));
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let (qh, kh, vh) = (lc.q.slice(cols), lc.k.slice(cols), lc.v.slice(cols));
        let d_oh = d_ctx.slice(cols);
        let p = &lc.probs[h];
        let mask = lc.prob_masks.as_ref().map(|m| &m[h]);
        let mut dqh = dq.slice_mut(cols);
        for r0 in (0..n).step_by(ATTN_BLOCK) {
            let r1 = (r0 + ATTN_BLOCK).min(n);
            let p_blk = p.slice(s![r0..r1, ..r1]);
            let d_o_blk = d_oh.slice(s![r0..r1, ..]);
            let vis = match mask {
                Some(m) => &p_blk * &m.slice(s![r0..r1, ..r1]),
                None => p_blk.to_owned(),
            };
            general_mat_mul(T::one(), &vis.t(), &d_o_blk, T::one(), &mut dv.slice_mut(s![..r1, h * dh..(h + 1) * dh]));
            let mut dp = d_o_blk.dot(&vh.slice(s![..r1, ..]).t());
            if let Some(m) = mask {
                dp *= &m.slice(s![r0..r1, ..r1]);
            }
            // softmax backward: dS = P ⊙ (dP - rowsum(P ⊙ dP)), then the 1/√d_head factor
            for (mut dp_row, p_row) in dp.outer_iter_mut().zip(p_blk.outer_iter()) {
                let dot = dp_row.iter().zip(p_row.iter()).map(|(&a, &b)| a * b).fold(T::zero(), |a, b| a + b);
                Zip::from(&mut dp_row).and(&p_row).for_each(|g, &pv| *g = pv * (*g - dot) * scale);
            }
            general_mat_mul(T::one(), &dp, &kh.slice(s![..r1, ..]), T::zero(), &mut dqh.slice_mut(s![r0..r1, ..]));
            general_mat_mul(T::one(), &dp.t(), &qh.slice(s![r0..r1, ..]), T::one(), &mut dk.slice_mut(s![..r1, h * dh..(h + 1) * dh]));
        }
    }
    rotary.rotate(dq.view_mut(), n_heads, |r| r, true);
    rotary.rotate(dk.view_mut(), n_heads, |r| r, true);

    let h = lc.h_attn.view();
    let mut d_h = linear_backward(h, dq.view(), &layer.query, &mut lg.query);
    d_h += &linear_backward(h, dk.view(), &layer.key, &mut lg.key);
    d_h += &linear_backward(h, dv.view(), &layer.value, &mut lg.value);
    d_mid + layer_norm_backward(d_h.view(), &lc.attn_norm, &layer.attn_norm, &mut lg.attn_norm)
}
