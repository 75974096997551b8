use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{bpb, detect_glitch, MetricsRecord};
use super::optimizer::{clip_grad_norm, learning_rate, AdamW, LrSchedule};
use crate::corpus::{make_batch, ByteSegment, SpecialTokens};
use crate::error::{invalid, Error, Result};
use crate::model::{cross_entropy, Checkpoint, LanguageModel, Routing};
use crate::router::RoutingState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    /// Accepted for config compatibility; the CPU path computes in f32.
    Mixed,
}

fn default_eval_batches() -> usize {
    4
}

fn default_glitch_window() -> usize {
    1
}

/// Optimization and bookkeeping settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    /// Rise in smoothed eval BPB above its running minimum that counts as a glitch.
    pub glitch_threshold: f64,
    pub precision: Precision,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    #[serde(default = "default_glitch_window")]
    pub glitch_window: usize,
    /// Restore the last non-glitched parameters when a glitch is flagged.
    #[serde(default)]
    pub rollback_on_glitch: bool,
    /// Stop once eval BPB drops below this value.
    #[serde(default)]
    pub target_bpb: Option<f64>,
    /// Stop after this much wall-clock time.
    #[serde(default)]
    pub max_wall_clock_s: Option<f64>,
}

impl TrainConfig {
    /// Settings used with the desk model preset.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            lr: 2e-3,
            lr_schedule: LrSchedule::CosineWithWarmup,
            warmup_steps: 50,
            weight_decay: 0.1,
            grad_clip_norm: 1.0,
            total_steps: 2000,
            eval_interval: 50,
            seed: 0,
            glitch_threshold: 0.3,
            precision: Precision::F32,
            eval_batches: 4,
            glitch_window: 1,
            rollback_on_glitch: false,
            target_bpb: None,
            max_wall_clock_s: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(invalid("lr must be positive"));
        }
        if self.eval_interval == 0 {
            return Err(invalid("eval_interval must be >= 1"));
        }
        if self.batch_size == 0 || self.eval_batches == 0 {
            return Err(invalid("batch_size and eval_batches must be >= 1"));
        }
        if !(self.glitch_threshold > 0.0) {
            return Err(invalid("glitch_threshold must be positive"));
        }
        Ok(())
    }
}

/// Tokenized train and eval segments.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<ByteSegment>,
    pub eval: Vec<ByteSegment>,
    pub special: SpecialTokens,
}

/// Result of an evaluation pass.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub total_nats: f64,
    pub n_targets: usize,
    /// UTF-8 bytes of the evaluated text plus one per segment for eos;
    /// identical for every tokenizer.
    pub n_bytes: usize,
    pub bpb: f64,
    pub picked_fraction: f64,
    /// Router weights at every valid position (empty without a router).
    pub router_weights: Vec<f32>,
}

impl EvalResult {
    pub fn mean_nats(&self) -> f64 {
        self.total_nats / self.n_targets as f64
    }
}

/// Evaluates on the first `max_batches * batch_size` segments.
pub fn evaluate<M: LanguageModel<f32>>(
    model: &M,
    segments: &[ByteSegment],
    special: SpecialTokens,
    batch_size: usize,
    max_batches: usize,
) -> Result<EvalResult> {
    let ctx = model.config().context_length;
    let take = segments.len().min(batch_size.saturating_mul(max_batches));
    if take == 0 {
        return Err(invalid("no evaluation segments"));
    }
    let mut total = 0.0;
    let mut n_targets = 0;
    let mut n_bytes = 0;
    let mut picked = 0.0;
    let mut rows = 0;
    let mut weights = Vec::new();
    for chunk in segments[..take].chunks(batch_size) {
        let batch = make_batch(chunk, ctx, special)?;
        let out = model.forward(&batch.ids, Some(&batch.valid), Routing::TopK)?;
        let (loss, _) = cross_entropy(&out.logits, &batch.ids, &batch.loss_mask)?;
        total += loss.total_nats;
        n_targets += loss.n_targets;
        n_bytes += chunk.iter().map(|s| s.byte_len + 1).sum::<usize>();
        rows += chunk.len();
        if out.routing.is_empty() {
            picked += chunk.len() as f64;
        }
        for (r, st) in out.routing.iter().enumerate() {
            let valid: Vec<usize> = (0..batch.width()).filter(|&t| batch.valid[[r, t]] != 0).collect();
            picked += st.picked_fraction(valid.len());
            weights.extend(valid.iter().map(|&t| st.w[t]));
        }
    }
    Ok(EvalResult {
        total_nats: total,
        n_targets,
        n_bytes,
        bpb: bpb(total, n_bytes)?,
        picked_fraction: picked / rows as f64,
        router_weights: weights,
    })
}

/// Threshold such that about `fraction` of `weights` are `>=` it: the
/// empirical `(1 - fraction)` quantile.
pub fn calibrate_threshold(weights: &[f32], fraction: f64) -> f32 {
    if weights.is_empty() {
        return 0.0;
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(f32::total_cmp);
    let n = sorted.len();
    let idx = (((1.0 - fraction) * n as f64).round() as usize).min(n - 1);
    sorted[idx]
}

pub struct TrainOutcome<M> {
    pub model: M,
    pub metrics: Vec<MetricsRecord>,
    pub router_threshold: f32,
    pub checkpoint: Checkpoint,
    pub steps_run: usize,
}

fn dump_failure(step: usize, batch: &crate::corpus::Batch, routing: &[RoutingState<f32>]) -> String {
    let rows: Vec<Vec<u32>> = batch.ids.rows().into_iter().map(|r| r.to_vec()).collect();
    serde_json::json!({ "step": step, "ids": rows, "routing": routing }).to_string()
}

/// Trains `model` on `data`, calling `on_record` after every evaluation.
pub fn train<M: LanguageModel<f32>>(
    mut model: M,
    data: &TrainData,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(invalid("no training segments"));
    }
    let ctx = model.config().context_length;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = AdamW::new(&model, cfg.weight_decay);
    let start = Instant::now();
    let mut metrics: Vec<MetricsRecord> = Vec::new();
    let mut tokens_seen = 0u64;
    let mut bytes_seen = 0u64;
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    let mut last_good: Option<M> = None;
    let mut steps_run = 0;

    for step in 0..cfg.total_steps {
        let mut segs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            segs.push(data.train[order[cursor]].clone());
            cursor += 1;
        }
        let batch = make_batch(&segs, ctx, data.special)?;
        let (loss, mut grads, routing) = model.loss_and_grad(&batch)?;
        if !loss.mean_nats.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: dump_failure(step, &batch, &routing),
            });
        }
        clip_grad_norm(&mut grads, cfg.grad_clip_norm);
        let lr = learning_rate(cfg.lr_schedule, cfg.lr, step, cfg.warmup_steps, cfg.total_steps);
        opt.update(&mut model, &grads, lr);
        tokens_seen += loss.n_targets as u64;
        bytes_seen += batch.n_bytes as u64;
        loss_acc += loss.mean_nats;
        loss_n += 1;
        steps_run = step + 1;

        let last = step + 1 == cfg.total_steps;
        if (step + 1) % cfg.eval_interval == 0 || last {
            let ev = evaluate(&model, &data.eval, data.special, cfg.batch_size, cfg.eval_batches)?;
            let series: Vec<f64> = metrics.iter().map(|m| m.eval_bpb).chain([ev.bpb]).collect();
            let glitch = detect_glitch(&series, cfg.glitch_threshold, cfg.glitch_window)
                .last()
                .is_some_and(|&t| t == series.len() - 1);
            let rec = MetricsRecord {
                step: step + 1,
                train_loss_nats: loss_acc / loss_n as f64,
                eval_bpb: ev.bpb,
                tokens_seen,
                bytes_seen,
                picked_fraction: ev.picked_fraction,
                glitch,
                wall_clock_s: start.elapsed().as_secs_f64(),
            };
            loss_acc = 0.0;
            loss_n = 0;
            on_record(&rec);
            metrics.push(rec);
            if cfg.rollback_on_glitch {
                match (glitch, &last_good) {
                    (true, Some(good)) => model = good.clone(),
                    (false, _) => last_good = Some(model.clone()),
                    _ => {}
                }
            }
            if cfg.target_bpb.is_some_and(|t| ev.bpb < t) {
                break;
            }
            if cfg.max_wall_clock_s.is_some_and(|t| start.elapsed().as_secs_f64() > t) {
                break;
            }
        }
    }

    let ev = evaluate(&model, &data.eval, data.special, cfg.batch_size, cfg.eval_batches)?;
    let fraction = model.config().k as f64 / ctx as f64;
    let router_threshold = calibrate_threshold(&ev.router_weights, fraction);
    let mut checkpoint = Checkpoint::from_model(&model);
    checkpoint.step = steps_run as u64;
    checkpoint.router_threshold = router_threshold as f64;
    checkpoint.rng_state = format!("chacha8:{}:{}", cfg.seed, rng.get_word_pos());
    checkpoint.optimizer = opt.state(&model);
    Ok(TrainOutcome {
        model,
        metrics,
        router_threshold,
        checkpoint,
        steps_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_quantile() {
        let w: Vec<f32> = (0..100).map(|i| i as f32).collect();
        let t = calibrate_threshold(&w, 0.25);
        let frac = w.iter().filter(|&&v| v >= t).count() as f64 / 100.0;
        assert!((frac - 0.25).abs() <= 0.01);
        assert_eq!(calibrate_threshold(&[], 0.5), 0.0);
        assert_eq!(calibrate_threshold(&[1.0], 1.0), 1.0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::desk();
        c.validate().unwrap();
        c.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.eval_interval = 0;
        assert!(c.validate().is_err());
    }
}
