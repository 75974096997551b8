#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synergy_core::corpus::{make_batch, Batch, ByteSegment, SpecialTokens};
use synergy_core::model::{LanguageModel, ModelConfig, SynergyModel};
use synergy_core::router::PositioningMode;
use synergy_core::Scalar;

/// Tiny config used by the exhaustive property tests.
pub fn tiny_config(mode: PositioningMode) -> ModelConfig {
    ModelConfig {
        positioning: mode,
        ..ModelConfig::tiny()
    }
}

/// A model whose every tensor (router included) carries random values so
/// that no gradient path is trivially zero.
pub fn random_model<F: Scalar>(cfg: ModelConfig, seed: u64, scale: f64) -> SynergyModel<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = SynergyModel::<F>::new(cfg, &mut rng).unwrap();
    for (name, t) in m.tensors_mut() {
        let is_gain = name.ends_with("norm");
        t.mapv_inplace(|v| {
            let noise = F::lit(rng.random_range(-1.0..1.0) * scale);
            if is_gain {
                v + noise * F::lit(0.5)
            } else {
                noise
            }
        });
    }
    m
}

pub fn random_batch(cfg: &ModelConfig, rows: usize, seed: u64, full: bool) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segs: Vec<ByteSegment> = (0..rows)
        .map(|r| {
            let max = cfg.context_length - 2;
            let len = if full || r == 0 { max } else { rng.random_range(1..=max) };
            let bytes: Vec<u8> = (0..len).map(|_| rng.random_range(32..127)).collect();
            ByteSegment::from_bytes(&bytes)
        })
        .collect();
    make_batch(&segs, cfg.context_length, SpecialTokens::bytes()).unwrap()
}

pub fn random_ids(cfg: &ModelConfig, rows: usize, seed: u64) -> Array2<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cfg.context_length), || rng.random_range(0..256))
}

pub fn max_abs_diff<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

/// Outcome of perturbing each input position in turn.
#[derive(Debug, Default)]
pub struct CausalityProbe {
    /// Largest change of any logit before the perturbed position.
    pub max_prefix_diff: f64,
    /// Same, restricted to perturbations that left the selection before
    /// the perturbed position unchanged.
    pub max_prefix_diff_same_selection: f64,
    pub perturbations: usize,
    /// Perturbations that changed which positions before `j` were picked.
    pub prefix_selection_changes: usize,
}

pub fn probe_causality(
    model: &SynergyModel<f32>,
    routing: synergy_core::model::Routing<f32>,
    inputs: usize,
    seed: u64,
) -> CausalityProbe {
    let cfg = model.config().clone();
    let t = cfg.context_length;
    let v = cfg.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = CausalityProbe::default();
    for n in 0..inputs {
        let ids = random_ids(&cfg, 1, seed * 1000 + n as u64);
        let base = model.forward(&ids, None, routing).unwrap();
        for j in 1..t {
            let mut p = ids.clone();
            p[[0, j]] = (p[[0, j]] + rng.random_range(1..256)) % 256;
            let out = model.forward(&p, None, routing).unwrap();
            let mut diff = 0.0f64;
            for i in 0..j {
                for c in 0..v {
                    diff = diff.max((out.logits[[i, c]] - base.logits[[i, c]]).abs() as f64);
                }
            }
            let same = base.routing[0].mask[..j] == out.routing[0].mask[..j];
            probe.perturbations += 1;
            probe.max_prefix_diff = probe.max_prefix_diff.max(diff);
            if same {
                probe.max_prefix_diff_same_selection = probe.max_prefix_diff_same_selection.max(diff);
            } else {
                probe.prefix_selection_changes += 1;
            }
        }
    }
    probe
}
