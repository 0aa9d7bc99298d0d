//! Significance-weighted next-digit loss, Adam with decoupled weight decay,
//! the warmup/rsqrt schedule, and the per-window training loop.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_training_example, Dataset, WindowEntry};
use crate::error::{Error, Result};
use crate::model::{backward, forward_with_cache, init_params, ModelConfig, Parameters, PAD_TOKEN};
use crate::tokenizer::{tokenize_segment, TokenizerConfig};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub train_steps: usize,
    pub beta: f64,
    pub lr_constant: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Raw timesteps per training example.
    pub segment_len: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            train_steps: 100_000,
            beta: 0.3,
            lr_constant: 0.03,
            warmup_steps: 1000,
            weight_decay: 1e-5,
            seed: 0,
            segment_len: 256,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config("beta must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 || self.train_steps == 0 || self.warmup_steps == 0 || self.segment_len == 0 || self.log_every == 0 {
            return Err(Error::Config("training counts must be positive".into()));
        }
        if !(self.lr_constant > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr_constant must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Output of [`weighted_xent_loss`].
#[derive(Debug, Clone)]
pub struct WeightedLoss<T> {
    /// `-(Σ w_k log p_k) / Σ w_k`.
    pub loss: T,
    pub weights: Vec<T>,
    pub dlogits: Array2<T>,
}

/// Weight `β^(k mod p)` of the `k`-th (0-based) target in a digit stream.
pub fn digit_weight(k: usize, beta: f64, precision: usize) -> f64 {
    beta.powi((k % precision) as i32)
}

/// Negative significance-weighted log-likelihood of `targets` under
/// `logits`, normalized by the weight sum, with its gradient.
pub fn weighted_xent_loss<T: Scalar>(logits: ArrayView2<'_, T>, targets: &[usize], beta: f64, precision: usize) -> Result<WeightedLoss<T>> {
    if logits.nrows() != targets.len() {
        return Err(Error::LengthMismatch { expected: logits.nrows(), actual: targets.len() });
    }
    let weights: Vec<T> = (0..targets.len()).map(|k| T::lit(digit_weight(k, beta, precision))).collect();
    let total = weights.iter().copied().fold(T::zero(), |a, b| a + b);
    let mut dlogits = Array2::zeros(logits.dim());
    let mut loss = T::zero();
    for (k, (row, &target)) in logits.outer_iter().zip(targets).enumerate() {
        if target >= row.len() {
            return Err(Error::TokenOutOfRange { token: target, base: row.len() });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum = row.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, b| a + b);
        let log_z = max + sum.ln();
        let w = weights[k] / total;
        loss -= w * (row[target] - log_z);
        let mut drow = dlogits.row_mut(k);
        for (j, (d, &v)) in drow.iter_mut().zip(row.iter()).enumerate() {
            let p = (v - log_z).exp();
            *d = w * (p - if j == target { T::one() } else { T::zero() });
        }
    }
    Ok(WeightedLoss { loss, weights, dlogits })
}

/// `constant · min(step/warmup, 1) / √max(step, warmup)`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let step = step.max(1) as f64;
    let warmup = config.warmup_steps as f64;
    config.lr_constant * (step / warmup).min(1.0) / step.max(warmup).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        Self::with_config(params, AdamConfig::default())
    }

    pub fn with_config(params: &Parameters<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        Self { step: 0, config, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update with decoupled weight decay; norm gains
/// and biases are not decayed. Refuses non-finite gradients.
pub fn adam_step<T: Scalar>(params: &mut Parameters<T>, grads: &Parameters<T>, state: &mut AdamState<T>, lr: f64, weight_decay: f64) -> Result<()> {
    let grad_tensors = grads.tensors();
    if let Some(bad) = grad_tensors.iter().find(|t| t.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { step: state.step as usize + 1, what: format!("gradient of {}", bad.name) });
    }
    state.step += 1;
    let cfg = state.config;
    let t = state.step as i32;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let correction1 = T::lit(1.0 - cfg.beta1.powi(t));
    let correction2 = T::lit(1.0 - cfg.beta2.powi(t));
    let lr_t = T::lit(lr);
    let eps = T::lit(cfg.eps);
    let decay = T::lit(lr * weight_decay);

    for (((param, grad), m), v) in params.tensors_mut().into_iter().zip(&grad_tensors).zip(&mut state.m).zip(&mut state.v) {
        let decays = param.kind.decays() && weight_decay > 0.0;
        for (((theta, &g), mi), vi) in param.data.iter_mut().zip(grad.data).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let m_hat = *mi / correction1;
            let v_hat = *vi / correction2;
            if decays {
                *theta -= decay * *theta;
            }
            *theta -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Network input for a digit stream: the stream shifted right behind a pad
/// token, so the logits at position `k` score token `k`.
pub fn shift_right(tokens: &[usize]) -> Vec<usize> {
    let mut input = Vec::with_capacity(tokens.len());
    input.push(PAD_TOKEN);
    input.extend_from_slice(&tokens[..tokens.len().saturating_sub(1)]);
    input
}

/// Mean weighted loss over a batch of digit streams and the matching
/// gradient. Dropout is applied when `dropout_seed` is given; example `i`
/// then uses ChaCha stream `i` of that seed.
pub fn loss_and_grad<T: Scalar>(
    params: &Parameters<T>,
    batch: &[Vec<usize>],
    beta: f64,
    precision: usize,
    dropout_seed: Option<u64>,
) -> Result<(T, Parameters<T>)> {
    let per_example: Vec<Result<(T, Parameters<T>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, tokens)| {
            let mut rng = dropout_seed.map(|seed| {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                r.set_stream(i as u64);
                r
            });
            let input = shift_right(tokens);
            let cache = forward_with_cache(params, &input, rng.as_mut().map(|r| r as &mut dyn RngCore))?;
            let out = weighted_xent_loss(cache.logits.view(), tokens, beta, precision)?;
            let mut grads = params.zeros_like();
            backward(params, &cache, out.dlogits.view(), &mut grads);
            Ok((out.loss, grads))
        })
        .collect();

    let scale = T::lit(1.0 / batch.len() as f64);
    let mut total = params.zeros_like();
    let mut loss = T::zero();
    for item in per_example {
        let (l, g) = item?;
        loss += l * scale;
        total.add_scaled(&g, scale);
    }
    Ok((loss, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    /// Mean loss since the previous row.
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Stopped early; the parameters are the last finite ones.
    Aborted { step: usize, reason: String },
}

pub struct TrainOutcome<T> {
    pub params: Parameters<T>,
    pub log: Vec<LogRow>,
    pub status: TrainStatus,
}

/// Tokenized training batch: `batch_size` independent segments from the
/// window's training range.
pub fn sample_batch(
    dataset: &Dataset,
    window: &WindowEntry,
    tokenizer: &TokenizerConfig,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    (0..config.batch_size)
        .map(|_| {
            let ex = sample_training_example(dataset, window, config.segment_len, rng)?;
            Ok(tokenize_segment(&ex.segment, tokenizer)?.0.tokens)
        })
        .collect()
}

/// Trains a fresh model on one rolling window for exactly
/// `config.train_steps` steps.
pub fn train_window<T: Scalar>(
    dataset: &Dataset,
    window: &WindowEntry,
    model_config: &ModelConfig,
    tokenizer: &TokenizerConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_window_with(dataset, window, model_config, tokenizer, config, |_| {})
}

/// [`train_window`] with a callback invoked on every log row.
pub fn train_window_with<T: Scalar>(
    dataset: &Dataset,
    window: &WindowEntry,
    model_config: &ModelConfig,
    tokenizer: &TokenizerConfig,
    config: &TrainConfig,
    mut on_log: impl FnMut(&LogRow),
) -> Result<TrainOutcome<T>> {
    model_config.validate()?;
    tokenizer.validate()?;
    config.validate()?;
    if model_config.vocab_size != tokenizer.base {
        return Err(Error::Config("vocab_size must equal the tokenizer base".into()));
    }
    if config.segment_len * tokenizer.precision > model_config.max_seq_len {
        return Err(Error::Config(format!(
            "{} tokens per segment exceed max_seq_len {}",
            config.segment_len * tokenizer.precision,
            model_config.max_seq_len
        )));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params: Parameters<T> = init_params(model_config, &mut init_rng);
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = AdamState::new(&params);
    let mut log = Vec::new();
    let start = Instant::now();
    let mut interval_loss = 0.0;
    let mut interval_steps = 0usize;

    for step in 1..=config.train_steps {
        let batch = sample_batch(dataset, window, tokenizer, config, &mut data_rng)?;
        let dropout_seed = (model_config.dropout > 0.0).then(|| config.seed.wrapping_mul(1_000_003).wrapping_add(step as u64));
        let (loss, grads) = loss_and_grad(&params, &batch, config.beta, tokenizer.precision, dropout_seed)?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Ok(TrainOutcome { params, log, status: TrainStatus::Aborted { step, reason: "non-finite loss".into() } });
        }
        let lr = lr_at(step, config);
        let snapshot = params.clone();
        if let Err(e) = adam_step(&mut params, &grads, &mut adam, lr, config.weight_decay) {
            return Ok(TrainOutcome { params: snapshot, log, status: TrainStatus::Aborted { step, reason: e.to_string() } });
        }
        if !params.all_finite() {
            return Ok(TrainOutcome {
                params: snapshot,
                log,
                status: TrainStatus::Aborted { step, reason: "non-finite parameters".into() },
            });
        }
        interval_loss += loss;
        interval_steps += 1;
        if step % config.log_every == 0 || step == config.train_steps {
            let row = LogRow { step, loss: interval_loss / interval_steps as f64, lr, wall_ms: start.elapsed().as_millis() };
            log::debug!("step {step} loss {:.5} lr {:.3e}", row.loss, lr);
            on_log(&row);
            log.push(row);
            interval_loss = 0.0;
            interval_steps = 0;
        }
    }
    Ok(TrainOutcome { params, log, status: TrainStatus::Completed })
}

/// Writes a training log as CSV (`step,loss,lr,wall_ms`).
pub fn write_log_csv<W: std::io::Write>(writer: W, log: &[LogRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for row in log {
        out.serialize(row)?;
    }
    out.flush().map_err(|e| Error::InvalidArgument(format!("writing training log: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthKind, SynthSpec};
    use crate::model::{init_params, EmbeddingMode};
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn uniform_logits_give_ln_base() {
        let logits = Array2::<f64>::zeros((12, 10));
        let targets: Vec<usize> = (0..12).map(|i| (i * 7) % 10).collect();
        for beta in [0.3, 0.6, 0.9, 1.0] {
            let out = weighted_xent_loss(logits.view(), &targets, beta, 3).unwrap();
            assert!((out.loss - 10f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn beta_one_is_plain_mean_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits: Array2<f64> = Array2::from_shape_fn((9, 10), |_| rng.random_range(-2.0..2.0));
        let targets: Vec<usize> = (0..9).map(|_| rng.random_range(0..10)).collect();
        let out = weighted_xent_loss(logits.view(), &targets, 1.0, 3).unwrap();
        let mut plain = 0.0f64;
        for (row, &t) in logits.outer_iter().zip(&targets) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            plain -= (row[t].exp() / z).ln();
        }
        assert!((out.loss - plain / 9.0).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero_loss() {
        let targets = [3usize, 1, 4];
        let mut logits = Array2::<f64>::zeros((3, 10));
        for (k, &t) in targets.iter().enumerate() {
            logits[[k, t]] = 60.0;
        }
        let out = weighted_xent_loss(logits.view(), &targets, 0.3, 3).unwrap();
        assert!(out.loss < 1e-20);
    }

    #[test]
    fn significance_weights_decrease_within_each_number() {
        for k in (0..30).step_by(3) {
            let w0 = digit_weight(k, 0.3, 3);
            assert!(w0 > digit_weight(k + 1, 0.3, 3));
            assert!(digit_weight(k + 1, 0.3, 3) > digit_weight(k + 2, 0.3, 3));
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut logits: Array2<f64> = Array2::from_shape_fn((7, 10), |_| rng.random_range(-2.0..2.0));
        let targets: Vec<usize> = (0..7).map(|_| rng.random_range(0..10)).collect();
        let out = weighted_xent_loss(logits.view(), &targets, 0.3, 3).unwrap();
        let h = 1e-6f64;
        for i in 0..7 {
            for j in 0..10 {
                let orig = logits[[i, j]];
                logits[[i, j]] = orig + h;
                let up = weighted_xent_loss(logits.view(), &targets, 0.3, 3).unwrap().loss;
                logits[[i, j]] = orig - h;
                let down = weighted_xent_loss(logits.view(), &targets, 0.3, 3).unwrap().loss;
                logits[[i, j]] = orig;
                assert!(((up - down) / (2.0 * h) - out.dlogits[[i, j]]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert!((lr_at(1000, &cfg) - 0.03 / 1000f64.sqrt()).abs() < 1e-15);
        assert!((lr_at(500, &cfg) - 0.5 * lr_at(1000, &cfg)).abs() < 1e-15);
        assert!((lr_at(4000, &cfg) - 0.03 / 4000f64.sqrt()).abs() < 1e-15);
        assert!((lr_at(999, &cfg) - lr_at(1000, &cfg)).abs() < 1e-6);
        for s in 1000..5000 {
            assert!(lr_at(s + 1, &cfg) <= lr_at(s, &cfg));
        }
    }

    fn scalar_model() -> Parameters<f64> {
        let cfg = ModelConfig { d_model: 2, d_ff: 1, n_layers: 0, n_heads: 1, vocab_size: 2, max_seq_len: 4, dropout: 0.0, embedding_mode: EmbeddingMode::Shared, precision: 1 };
        init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut params = scalar_model();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.1, 0.0).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = scalar_model();
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads.head.bias[0] = 1.0;
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.1, 0.0).unwrap();
        let moved = before.head.bias[0] - params.head.bias[0];
        assert!((moved - 0.1).abs() < 1e-8);
        assert_eq!(params.head.bias[1], before.head.bias[1]);
    }

    #[test]
    fn adam_weight_decay_scales_weights_only() {
        let mut params = scalar_model();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.5, 0.1).unwrap();
        for (a, b) in params.head.weight.iter().zip(before.head.weight.iter()) {
            assert!((a - b * (1.0 - 0.05)).abs() < 1e-15);
        }
        assert_eq!(params.final_norm, before.final_norm);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut params = scalar_model();
        let mut grads = params.zeros_like();
        grads.head.weight[[0, 0]] = f64::NAN;
        let mut state = AdamState::new(&params);
        assert!(matches!(adam_step(&mut params, &grads, &mut state, 0.1, 0.0), Err(Error::NonFinite { .. })));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn shift_right_pads_front() {
        assert_eq!(shift_right(&[4, 5, 6]), vec![0, 4, 5]);
    }

    fn tiny_setup(kind: SynthKind) -> (Dataset, WindowEntry, ModelConfig, TokenizerConfig) {
        let ds = generate_synthetic(&SynthSpec { kind, length: 400, series: 2, seed: 3 }).unwrap();
        let entry = WindowEntry { train_start: 0, train_end: 376, eval_start: 376, eval_end: 400 };
        let model = ModelConfig { d_model: 16, d_ff: 32, n_layers: 2, n_heads: 2, vocab_size: 10, max_seq_len: 192, dropout: 0.0, embedding_mode: EmbeddingMode::Shared, precision: 3 };
        (ds, entry, model, TokenizerConfig::default())
    }

    #[test]
    fn constant_series_trains_to_near_zero_loss() {
        let (ds, entry, model, tok) = tiny_setup(SynthKind::Sine { period: 24.0, amplitude: 0.0, offset: 7.0, noise: 0.0, phase_step: 0.0 });
        let cfg = TrainConfig { batch_size: 2, train_steps: 2000, segment_len: 64, warmup_steps: 200, seed: 1, log_every: 100, ..TrainConfig::default() };
        let out: TrainOutcome<f32> = train_window(&ds, &entry, &model, &tok, &cfg).unwrap();
        assert_eq!(out.status, TrainStatus::Completed);
        assert_eq!(out.log.len(), 20);
        let last = out.log.last().unwrap().loss;
        assert!(last < 0.05, "final loss {last}");
    }

    #[test]
    fn training_is_deterministic_and_sine_loss_decreases() {
        let (ds, entry, model, tok) = tiny_setup(SynthKind::Sine { period: 24.0, amplitude: 5.0, offset: 10.0, noise: 0.0, phase_step: 3.0 });
        let model = ModelConfig { dropout: 0.1, ..model };
        let cfg = TrainConfig { batch_size: 2, train_steps: 300, segment_len: 48, warmup_steps: 100, seed: 5, log_every: 100, ..TrainConfig::default() };
        let a: TrainOutcome<f32> = train_window(&ds, &entry, &model, &tok, &cfg).unwrap();
        let b: TrainOutcome<f32> = train_window(&ds, &entry, &model, &tok, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        let losses: Vec<f64> = a.log.iter().map(|r| r.loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }
}
