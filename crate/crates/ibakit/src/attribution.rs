//! Per-token relevance scores, shared by every attribution method.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-token relevance for one instance. `tokens` covers the real (non-PAD)
/// positions in order; the leading `[CLS]` entry is scored but never removed
/// by the degradation protocol. Methods without a layer or beta use 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub method: String,
    pub layer: usize,
    pub beta: f64,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    pub target: usize,
    pub seed: u64,
}

impl AttributionMap {
    /// Shared schema check: aligned token/score lists, finite scores.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() || self.tokens.len() != self.scores.len() {
            return Err(Error::Contract(format!(
                "attribution map has {} tokens but {} scores",
                self.tokens.len(),
                self.scores.len()
            )));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidValue("non-finite attribution score".into()));
        }
        if self.method.is_empty() {
            return Err(Error::Contract("empty method tag".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let map: AttributionMap = serde_json::from_str(s)?;
        map.validate()?;
        Ok(map)
    }
}

/// Deterministic per-instance seed derived from the global seed (splitmix64).
pub fn instance_seed(global_seed: u64, instance_index: usize) -> u64 {
    let mut z = global_seed
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(instance_index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
