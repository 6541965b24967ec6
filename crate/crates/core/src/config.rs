use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the latent variables enter the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    /// One latent added to every input token embedding.
    Embedding,
    /// One latent projected to an extra key/value slot at every layer.
    Memory,
    /// One latent added to the final hidden state before the LM head.
    Softmax,
    /// A per-layer latent chain fused into the attention values.
    Della,
}

impl Paradigm {
    pub const ALL: [Paradigm; 4] = [Paradigm::Embedding, Paradigm::Memory, Paradigm::Softmax, Paradigm::Della];

    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Embedding => "embedding",
            Paradigm::Memory => "memory",
            Paradigm::Softmax => "softmax",
            Paradigm::Della => "della",
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Paradigm::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown paradigm `{s}`")))
    }
}

/// Which layer KL terms enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlLayers {
    All,
    First,
    Last,
}

impl std::str::FromStr for KlLayers {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(KlLayers::All),
            "first" => Ok(KlLayers::First),
            "last" => Ok(KlLayers::Last),
            _ => Err(Error::Config(format!("unknown kl_layers `{s}`"))),
        }
    }
}

/// Attention pattern of the encoder pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderAttention {
    /// Every position sees the whole (unpadded) input, so the first-position
    /// state summarises the sequence.
    Bidirectional,
    /// Same mask as the decoder.
    Causal,
}

impl std::str::FromStr for EncoderAttention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bidirectional" => Ok(EncoderAttention::Bidirectional),
            "causal" => Ok(EncoderAttention::Causal),
            _ => Err(Error::Config(format!("unknown encoder attention `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub latent_dim: usize,
    pub rank: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub paradigm: Paradigm,
    /// First layer (1-based, inclusive) that carries a latent.
    pub latent_start_layer: usize,
    /// Last layer (1-based, inclusive) that carries a latent; 0 means `num_layers`.
    pub latent_end_layer: usize,
    pub separate_latents: bool,
    pub kl_layers: KlLayers,
    pub share_encoder_decoder: bool,
    pub conditional: bool,
    pub encoder_attention: EncoderAttention,
    /// Allocates the per-layer bag-of-words heads.
    pub bow_heads: bool,
    /// Gives the prior head a bias. Off keeps the first-layer prior pinned to
    /// N(0, I); with a bias it can drift to track the posterior and the KL
    /// collapses.
    pub prior_bias: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 128,
            num_heads: 4,
            latent_dim: 16,
            rank: 2,
            vocab_size: crate::harness::tokenizer::VOCAB_SIZE,
            max_len: 128,
            paradigm: Paradigm::Della,
            latent_start_layer: 1,
            latent_end_layer: 0,
            separate_latents: false,
            kl_layers: KlLayers::All,
            share_encoder_decoder: false,
            conditional: false,
            encoder_attention: EncoderAttention::Bidirectional,
            bow_heads: false,
            prior_bias: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// 1-based inclusive range of layers that own latent heads. Baselines
    /// draw their single latent from the last layer.
    pub fn latent_layers(&self) -> std::ops::RangeInclusive<usize> {
        match self.paradigm {
            Paradigm::Della => self.latent_start_layer..=self.end_layer(),
            _ => self.num_layers..=self.num_layers,
        }
    }

    pub fn end_layer(&self) -> usize {
        if self.latent_end_layer == 0 {
            self.num_layers
        } else {
            self.latent_end_layer
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.hidden_dim == 0 || self.latent_dim == 0 {
            return bad("num_layers, hidden_dim and latent_dim must be positive".into());
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.rank < 1 {
            return bad("rank must be at least 1".into());
        }
        if self.vocab_size < 4 || self.max_len < 2 {
            return bad("vocab_size must be >= 4 and max_len >= 2".into());
        }
        let end = self.end_layer();
        if self.latent_start_layer < 1 || self.latent_start_layer > end || end > self.num_layers {
            return bad(format!(
                "latent layers {}..={} outside 1..={}",
                self.latent_start_layer, end, self.num_layers
            ));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }
}
