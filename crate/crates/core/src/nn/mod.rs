//! Transformer building blocks with hand-written backward passes.
//!
//! Activations are row-major `(tokens, dim)` matrices. A batch of
//! sequences is stored as consecutive row ranges ("spans"), so sequences of
//! different lengths share one matrix and attention never crosses a span.

mod attention;
mod layer;
mod mlp;
mod norm;
mod rope;

pub use attention::{causal_attention, AttnCache, AttnWeights};
pub use layer::{transformer_layer, LayerCache, LayerParams};
pub use mlp::{swiglu_mlp, MlpCache};
pub use norm::{rms_norm, rms_norm_backward, NormCache};
pub use rope::{rope_frequencies, rope_position_grad, rope_rotate, rotate_heads};

use std::ops::Range;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// How attention encodes token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnPositioning {
    /// Rotary encoding of integer positions.
    Rotary,
    /// Rotary encoding of real-valued positions; can report position gradients.
    RotaryReal,
    /// No positional encoding; positions are ignored.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    /// Local attention width: self plus `window - 1` predecessors.
    pub window: Option<usize>,
    pub positioning: AttnPositioning,
    pub rope_base: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads * self.head_dim != self.model_dim {
            return Err(invalid(format!(
                "n_heads ({}) x head_dim ({}) != model_dim ({})",
                self.n_heads, self.head_dim, self.model_dim
            )));
        }
        if self.mlp_dim == 0 {
            return Err(invalid("mlp_dim must be positive"));
        }
        if self.window == Some(0) {
            return Err(invalid("window must be >= 1"));
        }
        if self.positioning != AttnPositioning::None && self.head_dim % 2 != 0 {
            return Err(invalid("rotary encoding needs an even head_dim"));
        }
        Ok(())
    }

    pub fn with_window(&self, window: Option<usize>) -> Self {
        Self {
            window,
            ..self.clone()
        }
    }

    pub fn with_positioning(&self, positioning: AttnPositioning) -> Self {
        Self {
            positioning,
            ..self.clone()
        }
    }

    /// Weights in one transformer layer (two norm gains included).
    pub fn layer_params(&self) -> usize {
        let d = self.model_dim;
        4 * d * d + 3 * d * self.mlp_dim + 2 * d
    }
}

/// Spans covering `rows` sequences of equal `width`.
pub fn uniform_spans(rows: usize, width: usize) -> Vec<Range<usize>> {
    (0..rows).map(|r| r * width..(r + 1) * width).collect()
}

pub(crate) fn normal_matrix<F: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Array2<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || F::lit(dist.sample(rng)))
}

/// Checks that every value is finite.
pub fn all_finite<F: Scalar>(x: &Array2<F>) -> bool {
    x.iter().all(|v| v.is_finite())
}
