//! Analytical per-token FLOPs and cache memory model.
//!
//! A multiply-add counts as two FLOPs. Attention reads are linear in the
//! number of cached tokens actually read.

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsByCategory {
    pub embedding: u64,
    pub logits: u64,
    pub feed_forward: u64,
    pub qkvo: u64,
    pub attention: u64,
    pub drop_tokens: u64,
}

impl FlopsByCategory {
    pub const CATEGORIES: [&'static str; 6] = ["embedding", "logits", "feed_forward", "qkvo", "attention", "drop_tokens"];

    pub fn total(&self) -> u64 {
        self.values().iter().sum()
    }

    pub fn values(&self) -> [u64; 6] {
        [
            self.embedding,
            self.logits,
            self.feed_forward,
            self.qkvo,
            self.attention,
            self.drop_tokens,
        ]
    }

    pub fn accumulate(&mut self, other: &FlopsByCategory) {
        self.embedding += other.embedding;
        self.logits += other.logits;
        self.feed_forward += other.feed_forward;
        self.qkvo += other.qkvo;
        self.attention += other.attention;
        self.drop_tokens += other.drop_tokens;
    }
}

impl std::ops::Add for FlopsByCategory {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        self.accumulate(&rhs);
        self
    }
}

impl std::iter::Sum for FlopsByCategory {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// FLOPs to generate one token with a cache holding `context_len` tokens,
/// of which `kept_tokens` survive and are read.
///
/// `drop_tokens` is zero for configurations without learned pruning; pass
/// `learned = true` to include the interaction projections and logits.
pub fn count_flops(config: &ModelConfig, context_len: u64, kept_tokens: u64, learned: bool) -> Result<FlopsByCategory> {
    count_flops_per_layer(config, context_len, &vec![kept_tokens; config.n_layers], learned)
}

/// [`count_flops`] with a separate kept count for every layer.
pub fn count_flops_per_layer(
    config: &ModelConfig,
    context_len: u64,
    kept_per_layer: &[u64],
    learned: bool,
) -> Result<FlopsByCategory> {
    if kept_per_layer.len() != config.n_layers {
        return Err(Error::Shape(format!(
            "{} kept counts for {} layers",
            kept_per_layer.len(),
            config.n_layers
        )));
    }
    if let Some(&k) = kept_per_layer.iter().find(|&&k| k > context_len) {
        return Err(Error::Config(format!("kept_tokens {k} exceeds context_len {context_len}")));
    }
    let d = config.d_model as u64;
    let l = config.n_layers as u64;
    let r = config.r as u64;
    let ff = config.ff_dim() as u64;
    let kept: u64 = kept_per_layer.iter().sum();
    Ok(FlopsByCategory {
        embedding: d,
        logits: 2 * d * config.n_vocab as u64,
        feed_forward: l * 4 * d * ff,
        qkvo: l * 8 * d * d,
        attention: 4 * d * kept,
        drop_tokens: if learned { l * 4 * d * r + 2 * r * kept } else { 0 },
    })
}

/// Bytes held by a cache of `capacity` slots per row across all layers.
pub fn cache_bytes(config: &ModelConfig, capacity: usize, batch: usize, with_interaction: bool) -> u64 {
    (capacity * config.cache_width(with_interaction) * 4 * batch * config.n_layers) as u64
}
