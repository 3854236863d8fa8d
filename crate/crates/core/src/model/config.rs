use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Rotary embeddings on query/key; learned absolute positions otherwise.
    pub rope: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 48,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 48,
            rope: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.rope && self.head_dim() % 2 != 0 {
            return Err(Error::Config("rotary embeddings need an even head dimension".into()));
        }
        if self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("d_ff and max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form scalar count of a full parameter set.
    pub fn param_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let per_layer = 2 * d + 4 * d * d + 2 * d * f;
        let pos = if self.rope { 0 } else { self.max_seq_len * d };
        v * d + pos + self.n_layers * per_layer + d + d * v
    }
}
