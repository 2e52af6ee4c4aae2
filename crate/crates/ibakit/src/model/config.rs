use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the toy encoder classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 512,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 64,
            n_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.max_seq_len,
            self.n_classes,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Input("all model config counts must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Input(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
