use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsRecord;
use super::trainer::{train, TrainConfig, TrainData};
use crate::error::{invalid, Result};
use crate::model::{ModelConfig, SynergyModel};
use crate::router::PositioningMode;

/// Average UTF-8 bytes per subword token of a byte-level BPE tokenizer on
/// English text; `context_length / BBPE_BYTES_PER_TOKEN` is the reference
/// concept-token count in the k sweep.
pub const BBPE_BYTES_PER_TOKEN: f64 = 4.25;

/// One training run of an ablation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub mode: PositioningMode,
    pub k: usize,
    pub final_bpb: Option<f64>,
    pub picked_fraction: Option<f64>,
    /// Published value at full scale, for annotation only.
    pub reference_bpb: Option<f64>,
    pub error: Option<String>,
    pub curve: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub name: String,
    pub rows: Vec<AblationRow>,
    /// Concept-token count equivalent to a BBPE tokenizer at this context.
    pub bbpe_reference_tokens: Option<f64>,
}

impl AblationTable {
    pub fn completed(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_none()).count()
    }

    /// Comparison table, one line per run.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,mode,k,final_bpb,picked_fraction,reference_bpb,bbpe_reference_tokens,error\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.label,
                r.mode,
                r.k,
                opt(r.final_bpb),
                opt(r.picked_fraction),
                opt(r.reference_bpb),
                opt(self.bbpe_reference_tokens),
                err
            );
        }
        s
    }

    /// Long-format eval curves: one line per (run, eval step).
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("label,step,eval_bpb,train_loss_nats,picked_fraction,glitch\n");
        for r in &self.rows {
            for m in &r.curve {
                let _ = writeln!(
                    s,
                    "{},{},{:.6},{:.6},{:.6},{}",
                    r.label, m.step, m.eval_bpb, m.train_loss_nats, m.picked_fraction, m.glitch
                );
            }
        }
        s
    }
}

fn run_one(
    cfg: ModelConfig,
    train_cfg: &TrainConfig,
    data: &TrainData,
    label: String,
    reference_bpb: Option<f64>,
    on_record: &mut dyn FnMut(&str, &MetricsRecord),
) -> AblationRow {
    let mode = cfg.positioning;
    let k = cfg.k;
    let result = (|| {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        let model = SynergyModel::<f32>::new(cfg, &mut rng)?;
        train(model, data, train_cfg, |m| on_record(&label, m))
    })();
    match result {
        Ok(out) => {
            let last = out.metrics.last();
            AblationRow {
                label,
                mode,
                k,
                final_bpb: last.map(|m| m.eval_bpb),
                picked_fraction: last.map(|m| m.picked_fraction),
                reference_bpb,
                error: None,
                curve: out.metrics,
            }
        }
        Err(e) => AblationRow {
            label,
            mode,
            k,
            final_bpb: None,
            picked_fraction: None,
            reference_bpb,
            error: Some(e.to_string()),
            curve: Vec::new(),
        },
    }
}

/// Trains one model per positioning mode from the same seed and data order.
/// A failing mode is recorded in its row and the remaining modes still run.
pub fn run_positioning_ablation(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &TrainData,
    modes: &[PositioningMode],
    mut on_record: impl FnMut(&str, &MetricsRecord),
) -> Result<AblationTable> {
    if modes.is_empty() {
        return Err(invalid("at least one positioning mode is required"));
    }
    let rows = modes
        .iter()
        .map(|&mode| {
            let mut cfg = base.clone();
            cfg.positioning = mode;
            run_one(cfg, train_cfg, data, mode.name().to_string(), Some(mode.reference_bpb()), &mut on_record)
        })
        .collect();
    Ok(AblationTable {
        name: "positioning".into(),
        rows,
        bbpe_reference_tokens: None,
    })
}

/// Trains one model per concept-token count from the same seed and data order.
pub fn run_k_sweep(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &TrainData,
    k_values: &[usize],
    mut on_record: impl FnMut(&str, &MetricsRecord),
) -> Result<AblationTable> {
    if k_values.is_empty() {
        return Err(invalid("at least one k is required"));
    }
    if let Some(&k) = k_values.iter().find(|&&k| k == 0 || k > base.context_length) {
        return Err(invalid(format!("k = {k} outside 1..={}", base.context_length)));
    }
    let rows = k_values
        .iter()
        .map(|&k| {
            let mut cfg = base.clone();
            cfg.k = k;
            run_one(cfg, train_cfg, data, format!("k={k}"), None, &mut on_record)
        })
        .collect();
    Ok(AblationTable {
        name: "k_sweep".into(),
        rows,
        bbpe_reference_tokens: Some(base.context_length as f64 / BBPE_BYTES_PER_TOKEN),
    })
}
