use serde::{Deserialize, Serialize};

use crate::corpus::BYTE_VOCAB_SIZE;
use crate::error::{invalid, Result};
use crate::nn::{AttnPositioning, BlockConfig};
use crate::router::PositioningMode;

/// Vocabulary of the full-scale token-level baseline.
pub const LLAMA3_VOCAB: usize = 128_256;

/// Architecture and routing hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub enc_layers: usize,
    pub mid_layers: usize,
    pub dec_layers: usize,
    /// Shared layer shape. `block.window` is the encoder/decoder window;
    /// the middle stack always attends over its whole prefix.
    pub block: BlockConfig,
    /// Concept tokens routed through the middle stack per sequence.
    pub k: usize,
    pub positioning: PositioningMode,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// 32 layers split 4/24/4, width 1024, 16 heads of 64, SwiGLU 4096,
    /// 1024-byte context with 224 concept tokens.
    pub fn paper() -> Self {
        Self {
            vocab_size: BYTE_VOCAB_SIZE,
            context_length: 1024,
            enc_layers: 4,
            mid_layers: 24,
            dec_layers: 4,
            block: BlockConfig {
                model_dim: 1024,
                n_heads: 16,
                head_dim: 64,
                mlp_dim: 4096,
                window: Some(128),
                positioning: AttnPositioning::Rotary,
                rope_base: 10000.0,
            },
            k: 224,
            positioning: PositioningMode::None,
            tie_embeddings: false,
        }
    }

    /// Proportional shrink of [`ModelConfig::paper`] that trains on a CPU;
    /// keeps k/T at 21.875%.
    pub fn desk() -> Self {
        Self {
            vocab_size: BYTE_VOCAB_SIZE,
            context_length: 256,
            enc_layers: 2,
            mid_layers: 4,
            dec_layers: 2,
            block: BlockConfig {
                model_dim: 128,
                n_heads: 4,
                head_dim: 32,
                mlp_dim: 512,
                window: Some(32),
                positioning: AttnPositioning::Rotary,
                rope_base: 10000.0,
            },
            k: 56,
            positioning: PositioningMode::None,
            tie_embeddings: false,
        }
    }

    /// A few-thousand-parameter model for exhaustive tests.
    pub fn tiny() -> Self {
        Self {
            vocab_size: BYTE_VOCAB_SIZE,
            context_length: 24,
            enc_layers: 1,
            mid_layers: 2,
            dec_layers: 1,
            block: BlockConfig {
                model_dim: 32,
                n_heads: 4,
                head_dim: 8,
                mlp_dim: 64,
                window: Some(6),
                positioning: AttnPositioning::Rotary,
                rope_base: 10000.0,
            },
            k: 8,
            positioning: PositioningMode::None,
            tie_embeddings: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(invalid(format!("unknown preset {name:?} (paper, desk, tiny)"))),
        }
    }

    pub fn total_layers(&self) -> usize {
        self.enc_layers + self.mid_layers + self.dec_layers
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(invalid("encoder and decoder need at least one layer each"));
        }
        if self.k == 0 || self.k > self.context_length {
            return Err(invalid(format!(
                "k = {} must be in 1..={}",
                self.k, self.context_length
            )));
        }
        if self.vocab_size == 0 || self.context_length == 0 {
            return Err(invalid("vocab_size and context_length must be positive"));
        }
        Ok(())
    }

    /// Encoder/decoder layer shape: local window, rotary integer positions.
    pub fn outer_block(&self) -> BlockConfig {
        self.block.with_positioning(AttnPositioning::Rotary)
    }

    /// Middle layer shape: full causal attention, positioning per mode.
    pub fn middle_block(&self) -> BlockConfig {
        self.block
            .with_window(None)
            .with_positioning(self.positioning.attn_positioning())
    }

    /// Layer shape of the dense baseline: full causal, rotary.
    pub fn dense_block(&self) -> BlockConfig {
        self.block
            .with_window(None)
            .with_positioning(AttnPositioning::Rotary)
    }

    fn embedding_params(&self) -> usize {
        let e = self.vocab_size * self.block.model_dim;
        if self.tie_embeddings {
            e
        } else {
            2 * e
        }
    }

    /// Closed-form parameter count of the routed model.
    pub fn synergy_params(&self) -> usize {
        let d = self.block.model_dim;
        self.embedding_params()
            + self.total_layers() * self.block.layer_params()
            + (d + 1) // router
            + d + d * d // middle output norm and projection
            + d // final norm
    }

    /// Closed-form parameter count of the dense baseline with the same layers.
    pub fn dense_params(&self) -> usize {
        self.embedding_params() + self.total_layers() * self.block.layer_params() + self.block.model_dim
    }
}
