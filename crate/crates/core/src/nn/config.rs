use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a pre-norm decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::config("model.num_layers must be >= 1"));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "model.d_model ({}) must be a positive multiple of model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::config("model.d_ff must be >= 1"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config(format!("model.vocab_size must be >= 2, got {}", self.vocab_size)));
        }
        if self.max_seq_len < 1 {
            return Err(Error::config("model.max_seq_len must be >= 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn with_layers(&self, num_layers: usize) -> Self {
        ModelConfig { num_layers, ..self.clone() }
    }
}
