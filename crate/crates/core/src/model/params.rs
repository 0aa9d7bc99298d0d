use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{EmbeddingMode, ModelConfig};
use crate::Scalar;

/// Standard deviation of the truncated normal used for weight matrices.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Array1<T>,
    pub bias: Array1<T>,
}

/// Affine map `x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub attn_norm: LayerNorm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub ff_norm: LayerNorm<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
}

/// All trainable tensors. The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub config: ModelConfig,
    pub embedding: Array2<T>,
    pub layers: Vec<DecoderLayer<T>>,
    pub final_norm: LayerNorm<T>,
    pub head: Linear<T>,
}

/// Role of a tensor, used to exempt norm parameters from weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Weight,
    Bias,
    NormGain,
    NormBias,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        !matches!(self, ParamKind::NormGain | ParamKind::NormBias)
    }
}

#[derive(Debug)]
pub struct TensorRef<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

#[derive(Debug)]
pub struct TensorMut<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

impl<T: Scalar> LayerNorm<T> {
    fn new(dim: usize) -> Self {
        Self { gain: Array1::ones(dim), bias: Array1::zeros(dim) }
    }

    fn zeros(dim: usize) -> Self {
        Self { gain: Array1::zeros(dim), bias: Array1::zeros(dim) }
    }
}

impl<T: Scalar> Linear<T> {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }

    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self { weight: truncated_normal((fan_in, fan_out), rng), bias: Array1::zeros(fan_out) }
    }
}

fn truncated_normal<T: Scalar, R: Rng + ?Sized>(shape: (usize, usize), rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::lit(z * INIT_STD);
        }
    })
}

impl<T: Scalar> DecoderLayer<T> {
    fn zeros(d: usize, d_ff: usize) -> Self {
        Self {
            attn_norm: LayerNorm::zeros(d),
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
            ff_norm: LayerNorm::zeros(d),
            ff_in: Linear::zeros(d, d_ff),
            ff_out: Linear::zeros(d_ff, d),
        }
    }
}

/// Closed-form number of trainable scalars.
pub fn param_count(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let ff = config.d_ff;
    let v = config.vocab_size;
    let embedding = config.embedding_rows() * d;
    let per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * ff + ff) + (ff * d + d);
    embedding + config.n_layers * per_layer + 2 * d + (d * v + v)
}

/// Random initialization: truncated `N(0, 0.02²)` weights and embeddings,
/// zero biases, unit norm gains.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Parameters<T> {
    let d = config.d_model;
    let embedding = truncated_normal((config.embedding_rows(), d), rng);
    let layers = (0..config.n_layers)
        .map(|_| DecoderLayer {
            attn_norm: LayerNorm::new(d),
            query: Linear::init(d, d, rng),
            key: Linear::init(d, d, rng),
            value: Linear::init(d, d, rng),
            output: Linear::init(d, d, rng),
            ff_norm: LayerNorm::new(d),
            ff_in: Linear::init(d, config.d_ff, rng),
            ff_out: Linear::init(config.d_ff, d, rng),
        })
        .collect();
    Parameters {
        config: config.clone(),
        embedding,
        layers,
        final_norm: LayerNorm::new(d),
        head: Linear::init(d, config.vocab_size, rng),
    }
}

impl<T: Scalar> Parameters<T> {
    /// All-zero tensors shaped like `config`'s parameters.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            config: config.clone(),
            embedding: Array2::zeros((config.embedding_rows(), d)),
            layers: (0..config.n_layers).map(|_| DecoderLayer::zeros(d, config.d_ff)).collect(),
            final_norm: LayerNorm::zeros(d),
            head: Linear::zeros(d, config.vocab_size),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        fn push<'a, T, D: ndarray::Dimension>(
            out: &mut Vec<TensorRef<'a, T>>,
            name: String,
            kind: ParamKind,
            a: &&'a ndarray::Array<T, D>,
        ) {
            out.push(TensorRef {
                name,
                kind,
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("parameters are contiguous"),
            });
        }
        let mut out = Vec::new();
        let Parameters { embedding, layers, final_norm, head, .. } = self;
        push(&mut out, "embedding".into(), ParamKind::Embedding, &embedding);
        for (i, layer) in layers.iter().enumerate() {
            let p = format!("layers.{i}");
            push(&mut out, format!("{p}.attn_norm.gain"), ParamKind::NormGain, &&layer.attn_norm.gain);
            push(&mut out, format!("{p}.attn_norm.bias"), ParamKind::NormBias, &&layer.attn_norm.bias);
            for (name, lin) in [("query", &layer.query), ("key", &layer.key), ("value", &layer.value), ("output", &layer.output)] {
                push(&mut out, format!("{p}.{name}.weight"), ParamKind::Weight, &&lin.weight);
                push(&mut out, format!("{p}.{name}.bias"), ParamKind::Bias, &&lin.bias);
            }
            push(&mut out, format!("{p}.ff_norm.gain"), ParamKind::NormGain, &&layer.ff_norm.gain);
            push(&mut out, format!("{p}.ff_norm.bias"), ParamKind::NormBias, &&layer.ff_norm.bias);
            for (name, lin) in [("ff_in", &layer.ff_in), ("ff_out", &layer.ff_out)] {
                push(&mut out, format!("{p}.{name}.weight"), ParamKind::Weight, &&lin.weight);
                push(&mut out, format!("{p}.{name}.bias"), ParamKind::Bias, &&lin.bias);
            }
        }
        push(&mut out, "final_norm.gain".into(), ParamKind::NormGain, &&final_norm.gain);
        push(&mut out, "final_norm.bias".into(), ParamKind::NormBias, &&final_norm.bias);
        push(&mut out, "head.weight".into(), ParamKind::Weight, &&head.weight);
        push(&mut out, "head.bias".into(), ParamKind::Bias, &&head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        fn push<'a, T, D: ndarray::Dimension>(
            out: &mut Vec<TensorMut<'a, T>>,
            name: String,
            kind: ParamKind,
            a: &'a mut ndarray::Array<T, D>,
        ) {
            let shape = a.shape().to_vec();
            out.push(TensorMut {
                name,
                kind,
                shape,
                data: a.as_slice_mut().expect("parameters are contiguous"),
            });
        }
        let mut out = Vec::new();
        let Parameters { embedding, layers, final_norm, head, .. } = self;
        push(&mut out, "embedding".into(), ParamKind::Embedding, embedding);
        for (i, layer) in layers.iter_mut().enumerate() {
            let DecoderLayer { attn_norm, query, key, value, output, ff_norm, ff_in, ff_out } = layer;
            let p = format!("layers.{i}");
            push(&mut out, format!("{p}.attn_norm.gain"), ParamKind::NormGain, &mut attn_norm.gain);
            push(&mut out, format!("{p}.attn_norm.bias"), ParamKind::NormBias, &mut attn_norm.bias);
            for (name, lin) in [("query", query), ("key", key), ("value", value), ("output", output)] {
                push(&mut out, format!("{p}.{name}.weight"), ParamKind::Weight, &mut lin.weight);
                push(&mut out, format!("{p}.{name}.bias"), ParamKind::Bias, &mut lin.bias);
            }
            push(&mut out, format!("{p}.ff_norm.gain"), ParamKind::NormGain, &mut ff_norm.gain);
            push(&mut out, format!("{p}.ff_norm.bias"), ParamKind::NormBias, &mut ff_norm.bias);
            for (name, lin) in [("ff_in", ff_in), ("ff_out", ff_out)] {
                push(&mut out, format!("{p}.{name}.weight"), ParamKind::Weight, &mut lin.weight);
                push(&mut out, format!("{p}.{name}.bias"), ParamKind::Bias, &mut lin.bias);
            }
        }
        push(&mut out, "final_norm.gain".into(), ParamKind::NormGain, &mut final_norm.gain);
        push(&mut out, "final_norm.bias".into(), ParamKind::NormBias, &mut final_norm.bias);
        push(&mut out, "head.weight".into(), ParamKind::Weight, &mut head.weight);
        push(&mut out, "head.bias".into(), ParamKind::Bias, &mut head.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Parameters<T>, scale: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, &b) in dst.data.iter_mut().zip(src.data) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let mut out = Parameters::<U>::zeros(&self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (a, &b) in dst.data.iter_mut().zip(src.data) {
                *a = U::lit(b.as_f64());
            }
        }
        out
    }
}

impl ModelConfig {
    /// Rows of the embedding table: one block of `vocab` rows per digit
    /// position in per-position mode.
    pub fn embedding_rows(&self) -> usize {
        match self.embedding_mode {
            EmbeddingMode::Shared => self.vocab_size,
            EmbeddingMode::PerPosition => self.precision * self.vocab_size,
        }
    }
}
