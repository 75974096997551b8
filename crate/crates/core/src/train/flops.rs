//! Analytic forward-pass FLOP counts (one multiply-add = 2 FLOPs).
//!
//! Per layer over `T` tokens of width `d`:
//! * MLP: `6 T d m` (gate, up and down projections),
//! * attention projections: `8 T d^2` (Q, K, V, O),
//! * attention scores: `4 d * sum_i span_i` (QK^T and PV), where `span_i`
//!   is the number of keys query `i` sees: `min(i + 1, W)` with a local
//!   window, `i + 1` otherwise.

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub mlp: f64,
    pub attn_proj: f64,
    pub attn_scores: f64,
    /// Output head over the vocabulary.
    pub head: f64,
    /// Router and middle output projection.
    pub other: f64,
}

impl FlopsBreakdown {
    pub fn attention(&self) -> f64 {
        self.attn_proj + self.attn_scores
    }

    pub fn total(&self) -> f64 {
        self.mlp + self.attn_proj + self.attn_scores + self.head + self.other
    }

    fn add(&mut self, o: &FlopsBreakdown, times: f64) {
        self.mlp += o.mlp * times;
        self.attn_proj += o.attn_proj * times;
        self.attn_scores += o.attn_scores * times;
        self.head += o.head * times;
        self.other += o.other * times;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub synergy: FlopsBreakdown,
    pub baseline: FlopsBreakdown,
    /// synergy total / baseline total
    pub ratio: f64,
    /// MLP part of the extra transformer-layer FLOPs:
    /// `Δmlp / (Δmlp + Δattention)`.
    pub mlp_share_of_extra: f64,
}

/// Sum over queries of the number of visible keys.
pub fn attention_span_sum(tokens: usize, window: Option<usize>) -> f64 {
    let t = tokens as f64;
    match window {
        Some(w) if w < tokens => {
            let w = w as f64;
            // first w queries see 1..=w keys, the rest see w
            w * (w + 1.0) / 2.0 + (t - w) * w
        }
        _ => t * (t + 1.0) / 2.0,
    }
}

/// FLOPs of one transformer layer over `tokens` positions.
pub fn layer_flops(dim: usize, mlp_dim: usize, tokens: usize, window: Option<usize>) -> FlopsBreakdown {
    let (d, m, t) = (dim as f64, mlp_dim as f64, tokens as f64);
    FlopsBreakdown {
        mlp: 6.0 * t * d * m,
        attn_proj: 8.0 * t * d * d,
        attn_scores: 4.0 * d * attention_span_sum(tokens, window),
        head: 0.0,
        other: 0.0,
    }
}

/// Routed model over `seq_bytes` bytes with `k` concept tokens versus a
/// dense model with the same layer count over `baseline_tokens` tokens and
/// a `baseline_vocab`-entry vocabulary.
pub fn estimate_flops(
    cfg: &ModelConfig,
    seq_bytes: usize,
    k: usize,
    baseline_tokens: usize,
    baseline_vocab: usize,
) -> FlopsReport {
    let b = &cfg.block;
    let d = b.model_dim as f64;
    let mut synergy = FlopsBreakdown::default();
    let outer = layer_flops(b.model_dim, b.mlp_dim, seq_bytes, b.window);
    synergy.add(&outer, (cfg.enc_layers + cfg.dec_layers) as f64);
    let middle = layer_flops(b.model_dim, b.mlp_dim, k, None);
    synergy.add(&middle, cfg.mid_layers as f64);
    synergy.head = 2.0 * seq_bytes as f64 * d * cfg.vocab_size as f64;
    synergy.other = 2.0 * seq_bytes as f64 * d + 2.0 * k as f64 * d * d;

    let mut baseline = FlopsBreakdown::default();
    let dense = layer_flops(b.model_dim, b.mlp_dim, baseline_tokens, None);
    baseline.add(&dense, cfg.total_layers() as f64);
    baseline.head = 2.0 * baseline_tokens as f64 * d * baseline_vocab as f64;

    let d_mlp = synergy.mlp - baseline.mlp;
    let d_attn = synergy.attention() - baseline.attention();
    let layer_extra = d_mlp + d_attn;
    FlopsReport {
        ratio: synergy.total() / baseline.total(),
        mlp_share_of_extra: if layer_extra > 0.0 { d_mlp / layer_extra } else { 0.0 },
        synergy,
        baseline,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LLAMA3_VOCAB;

    /// Counts multiply-adds one at a time.
    fn brute_layer(d: usize, m: usize, t: usize, window: Option<usize>) -> f64 {
        let mut macs = 0u64;
        for i in 0..t {
            macs += (4 * d * d) as u64; // q, k, v, o
            macs += (3 * d * m) as u64; // gate, up, down
            for j in 0..=i {
                if window.is_none_or(|w| i - j < w) {
                    macs += 2 * d as u64; // score and weighted value
                }
            }
        }
        2.0 * macs as f64
    }

    #[test]
    fn layer_matches_hand_count() {
        for (d, m, t, w) in [(4, 8, 6, Some(3)), (8, 16, 5, None), (2, 2, 1, Some(4)), (6, 10, 9, Some(1))] {
            let f = layer_flops(d, m, t, w);
            assert_eq!(f.total(), brute_layer(d, m, t, w), "{d} {m} {t} {w:?}");
        }
    }

    #[test]
    fn paper_preset_ratio() {
        let r = estimate_flops(&ModelConfig::paper(), 1024, 224, 241, LLAMA3_VOCAB);
        assert!(r.ratio >= 1.3 && r.ratio <= 2.0, "ratio {}", r.ratio);
        assert!(r.mlp_share_of_extra > 0.6, "share {}", r.mlp_share_of_extra);
        assert!(r.synergy.mlp > r.synergy.attention());
    }

    #[test]
    fn degenerate_subset_is_cheaper() {
        let mut c = ModelConfig::paper();
        c.enc_layers = 0;
        c.dec_layers = 0;
        let r = estimate_flops(&c, 1024, 241, 241, LLAMA3_VOCAB);
        assert!(r.ratio < 1.0);
    }
}
