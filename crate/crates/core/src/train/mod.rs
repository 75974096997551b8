//! Training loop, evaluation, FLOPs accounting and ablation runners.

mod ablation;
pub mod flops;
mod metrics;
mod optimizer;
mod trainer;

pub use ablation::{run_k_sweep, run_positioning_ablation, AblationRow, AblationTable, BBPE_BYTES_PER_TOKEN};
pub use flops::{estimate_flops, layer_flops, FlopsBreakdown, FlopsReport};
pub use metrics::{bpb, detect_glitch, smooth, write_csv, write_jsonl, MetricsRecord};
pub use optimizer::{clip_grad_norm, grad_norm, learning_rate, AdamW, LrSchedule};
pub use trainer::{calibrate_threshold, evaluate, train, EvalResult, Precision, TrainConfig, TrainData, TrainOutcome};
