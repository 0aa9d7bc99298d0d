//! Decoder-only transformer over digit tokens.
//!
//! Pre-norm blocks (causal multi-head attention with rotary position
//! encoding, then a GELU feed-forward), a final layer norm and a linear
//! head. Gradients are computed by hand in [`backward`].

mod decode;
mod forward;
mod ops;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use decode::{DecodeState, Decoder};
pub use forward::{backward, forward, forward_eval, forward_with_cache, next_token_distribution, ForwardCache};
pub use ops::{gelu, gelu_grad, rotary_apply, softmax, RotaryTable, LN_EPS, ROTARY_BASE};
pub use params::{init_params, param_count, DecoderLayer, LayerNorm, Linear, ParamKind, Parameters, TensorMut, TensorRef, INIT_STD};

/// Token fed at position 0 so that the first real token is also predicted.
pub const PAD_TOKEN: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// One embedding per digit value.
    Shared,
    /// Separate embeddings per digit value and significance.
    PerPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub embedding_mode: EmbeddingMode,
    /// Digits per value; only used to pick per-position embedding rows.
    pub precision: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            d_ff: 512,
            n_layers: 6,
            n_heads: 4,
            vocab_size: 10,
            max_seq_len: 768,
            dropout: 0.1,
            embedding_mode: EmbeddingMode::Shared,
            precision: 3,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.vocab_size < 2 {
            return Err(Error::Config("model dimensions must be positive and vocab_size >= 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_head().is_multiple_of(2) {
            return Err(Error::Config("d_head must be even for rotary encoding".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.precision == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("precision and max_seq_len must be positive".into()));
        }
        Ok(())
    }

    /// Embedding row for `token` at input position `pos`.
    pub fn embedding_row(&self, token: usize, pos: usize) -> usize {
        match self.embedding_mode {
            EmbeddingMode::Shared => token,
            EmbeddingMode::PerPosition => token + (pos % self.precision) * self.vocab_size,
        }
    }
}

#[cfg(test)]
mod tests;
