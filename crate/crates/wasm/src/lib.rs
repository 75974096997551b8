//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers and strings and returns a JSON or HTML
//! string, so the same functions are exercised natively by the tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use synergy_core::model::{Checkpoint, LanguageModel, ModelConfig, ModelKind, Routing, SynergyModel};
use synergy_core::router::{PositioningMode, RoutingState};
use synergy_core::train::{estimate_flops, BBPE_BYTES_PER_TOKEN};
use synergy_core::viz::{render_routing, route_text, VizFormat};
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// FLOPs of the routed model against the dense baseline for a preset,
/// with the sequence length and k overridden. `baseline_tokens == 0`
/// means bytes / 4.25. Returns the report as JSON.
#[wasm_bindgen]
pub fn flops_json(preset: &str, seq_bytes: usize, k: usize, baseline_tokens: usize) -> Result<String, String> {
    let cfg = ModelConfig::preset(preset).map_err(err)?;
    if seq_bytes == 0 || k == 0 || k > seq_bytes {
        return Err(format!("need 1 <= k <= seq_bytes, got k = {k}, seq_bytes = {seq_bytes}"));
    }
    let tokens = if baseline_tokens == 0 {
        ((seq_bytes as f64 / BBPE_BYTES_PER_TOKEN).round() as usize).max(1)
    } else {
        baseline_tokens
    };
    let r = estimate_flops(&cfg, seq_bytes, k, tokens, synergy_core::model::LLAMA3_VOCAB);
    let part = |b: &synergy_core::train::FlopsBreakdown| {
        json!({
            "mlp": b.mlp,
            "attention": b.attention(),
            "head": b.head,
            "other": b.other,
            "total": b.total(),
        })
    };
    Ok(json!({
        "baseline_tokens": tokens,
        "synergy": part(&r.synergy),
        "baseline": part(&r.baseline),
        "ratio": r.ratio,
        "mlp_share_of_extra": r.mlp_share_of_extra,
    })
    .to_string())
}

/// Routes a vector of router weights with top-k and reports the mask,
/// σ and the middle-stack position of every picked token under `mode`.
#[wasm_bindgen]
pub fn positions_json(weights: &[f64], k: usize, mode: &str) -> Result<String, String> {
    let mode: PositioningMode = mode.parse().map_err(err)?;
    if k == 0 || k > weights.len() {
        return Err(format!("need 1 <= k <= {}, got {k}", weights.len()));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err("router weights must be finite".into());
    }
    let valid = vec![true; weights.len()];
    let st = RoutingState::top_k(weights.to_vec(), k, &valid, mode).map_err(err)?;
    Ok(json!({
        "mask": st.mask,
        "sigma": st.sigma,
        "picked": st.picked,
        "positions": st.middle_positions,
    })
    .to_string())
}

/// Names of the middle-stack positioning modes.
#[wasm_bindgen]
pub fn positioning_modes() -> Vec<String> {
    PositioningMode::ALL.iter().map(|m| m.name().to_string()).collect()
}

/// A routed byte model held by the page.
#[wasm_bindgen]
pub struct Demo {
    model: SynergyModel<f32>,
    threshold: f32,
    trained: bool,
}

#[wasm_bindgen]
impl Demo {
    /// Untrained model of the given preset (`tiny` or `desk`) with a
    /// random router so that the picks are not all ties.
    pub fn random(preset: &str, seed: u64) -> Result<Demo, String> {
        if preset == "paper" {
            return Err("the paper preset is too large for the browser".into());
        }
        let cfg = ModelConfig::preset(preset).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = SynergyModel::new(cfg, &mut rng).map_err(err)?;
        let d = model.config().block.model_dim as f32;
        let scale = 3.0 / d.sqrt();
        for (name, t) in model.tensors_mut() {
            if name == "router.weight" {
                t.mapv_inplace(|_| rng.random_range(-scale..scale));
            }
        }
        Ok(Demo {
            model,
            threshold: 0.0,
            trained: false,
        })
    }

    /// Model from the bytes of a checkpoint written by `synergy train`.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<Demo, String> {
        let ck = Checkpoint::from_bytes(bytes).map_err(err)?;
        if ck.kind != ModelKind::Synergy {
            return Err("checkpoint holds a dense baseline, which has no router".into());
        }
        Ok(Demo {
            model: ck.synergy_model().map_err(err)?,
            threshold: ck.router_threshold as f32,
            trained: true,
        })
    }

    pub fn trained(&self) -> bool {
        self.trained
    }

    pub fn context_length(&self) -> usize {
        self.model.config().context_length
    }

    pub fn k(&self) -> usize {
        self.model.config().k
    }

    /// HTML fragment with one cell per byte of `text`, shaded by router
    /// weight, picked bytes in bold. `routing` is `topk` or `threshold`.
    pub fn render(&self, text: &str, routing: &str) -> Result<String, String> {
        let record = self.route(text, routing)?;
        let page = render_routing(&record, VizFormat::Html).map_err(err)?;
        let start = page.find("<div>").ok_or("unexpected render output")?;
        let end = page.rfind("</div>").ok_or("unexpected render output")? + "</div>".len();
        Ok(page[start..end].to_string())
    }

    /// Router weights and picks as JSON.
    pub fn route_json(&self, text: &str, routing: &str) -> Result<String, String> {
        let r = self.route(text, routing)?;
        Ok(json!({
            "w": r.w,
            "m": r.m,
            "picked_fraction": r.picked_fraction(),
            "k_over_t": self.k() as f64 / self.context_length() as f64,
        })
        .to_string())
    }
}

impl Demo {
    fn route(&self, text: &str, routing: &str) -> Result<synergy_core::viz::VizRecord, String> {
        let routing = match routing {
            "topk" => Routing::TopK,
            "threshold" => Routing::Threshold(self.threshold),
            other => return Err(format!("unknown routing {other:?} (topk, threshold)")),
        };
        route_text(&self.model, text.as_bytes(), routing).map_err(err)
    }
}
