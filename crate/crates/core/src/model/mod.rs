//! End-to-end models: the routed encoder/middle/decoder byte model and the
//! dense baseline, plus loss, checkpoints and sampling.

mod checkpoint;
mod config;
mod dense;
mod generate;
mod synergy;

pub use checkpoint::{Checkpoint, ModelKind, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, LLAMA3_VOCAB};
pub use dense::DenseModel;
pub use generate::generate;

pub use synergy::{SynergyForward, SynergyModel};

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::corpus::Batch;
use crate::error::{invalid, shape, Error, Result};
use crate::nn::normal_matrix;
use crate::router::RoutingState;
use crate::scalar::Scalar;

/// How the router picks concept tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Routing<F> {
    /// Sequence-level top-k (training and evaluation).
    TopK,
    /// Per-token comparison with a calibrated threshold (causal; generation).
    Threshold(F),
}

/// Logits for every position plus the routing decisions that produced them.
#[derive(Debug, Clone)]
pub struct ModelOutput<F> {
    /// `(rows * width, vocab)`
    pub logits: Array2<F>,
    /// One entry per row; empty for models without a router.
    pub routing: Vec<RoutingState<F>>,
}

/// Cross-entropy summary in nats.
#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    pub mean_nats: f64,
    pub total_nats: f64,
    pub n_targets: usize,
    /// `(rows, width)`; zero where the target is masked.
    pub per_position: Array2<F>,
}

/// Common surface of the trainable models.
pub trait LanguageModel<F: Scalar>: Clone + Send {
    fn config(&self) -> &ModelConfig;
    fn kind(&self) -> ModelKind;

    /// Gradient accumulator with the same tensor layout.
    fn zeros_like(&self) -> Self;

    fn tensors(&self) -> Vec<(String, &Array2<F>)>;

    fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<F>)>;

    fn forward(&self, ids: &Array2<u32>, valid: Option<&Array2<u8>>, routing: Routing<F>) -> Result<ModelOutput<F>>;

    /// Loss on `batch` and the gradient of its mean with respect to every
    /// tensor, in a model-shaped container.
    fn loss_and_grad(&self, batch: &Batch) -> Result<(LossOutput<F>, Self, Vec<RoutingState<F>>)>;

    fn count_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn check_ids(ids: &Array2<u32>, cfg: &ModelConfig) -> Result<()> {
    if ids.ncols() > cfg.context_length {
        return Err(shape(format!(
            "width {} exceeds context length {}",
            ids.ncols(),
            cfg.context_length
        )));
    }
    if ids.is_empty() {
        return Err(invalid("empty id matrix"));
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Token and output embeddings shared by both model kinds.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Embeddings<F> {
    pub embed: Array2<F>,
    /// `(dim, vocab)`; `None` when tied to `embed`.
    pub head: Option<Array2<F>>,
}

impl<F: Scalar> Embeddings<F> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (v, d) = (cfg.vocab_size, cfg.block.model_dim);
        Self {
            embed: normal_matrix(v, d, 0.02, rng),
            head: (!cfg.tie_embeddings).then(|| normal_matrix(d, v, 0.02, rng)),
        }
    }

    pub fn lookup(&self, ids: &Array2<u32>) -> Array2<F> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.embed.select(Axis(0), &idx)
    }

    pub fn logits(&self, h: &Array2<F>) -> Array2<F> {
        match &self.head {
            Some(w) => h.dot(w),
            None => h.dot(&self.embed.t()),
        }
    }

    /// Accumulates the head gradient and returns d(loss)/d(h).
    pub fn logits_backward(&self, h: &Array2<F>, dlogits: &Array2<F>, grads: &mut Self) -> Array2<F> {
        match (&self.head, &mut grads.head) {
            (Some(w), Some(gw)) => {
                *gw += &h.t().dot(dlogits);
                dlogits.dot(&w.t())
            }
            _ => {
                grads.embed += &dlogits.t().dot(h);
                dlogits.dot(&self.embed)
            }
        }
    }

    pub fn lookup_backward(&self, ids: &Array2<u32>, dx: &Array2<F>, grads: &mut Self) {
        for (&id, row) in ids.iter().zip(dx.rows()) {
            let mut g = grads.embed.row_mut(id as usize);
            g += &row;
        }
    }

    pub fn push_tensors<'a>(&'a self, out: &mut Vec<(String, &'a Array2<F>)>) {
        out.push(("embed".into(), &self.embed));
        if let Some(h) = &self.head {
            out.push(("head".into(), h));
        }
    }

    pub fn push_tensors_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Array2<F>)>) {
        out.push(("embed".into(), &mut self.embed));
        if let Some(h) = &mut self.head {
            out.push(("head".into(), h));
        }
    }
}

/// Mean next-token cross-entropy over positions whose target is unmasked.
/// The target of position `t` is `ids[t + 1]`.
pub fn cross_entropy<F: Scalar>(
    logits: &Array2<F>,
    ids: &Array2<u32>,
    loss_mask: &Array2<u8>,
) -> Result<(LossOutput<F>, Array2<F>)> {
    let (rows, width) = ids.dim();
    if logits.nrows() != rows * width || loss_mask.dim() != ids.dim() {
        return Err(shape(format!(
            "logits {:?}, ids {:?}, mask {:?}",
            logits.dim(),
            ids.dim(),
            loss_mask.dim()
        )));
    }
    let n_targets = (0..rows)
        .flat_map(|r| (0..width.saturating_sub(1)).map(move |t| (r, t)))
        .filter(|&(r, t)| loss_mask[[r, t]] != 0)
        .count();
    if n_targets == 0 {
        return Err(invalid("every target is masked"));
    }
    let inv_n = F::one() / F::from_usize(n_targets).unwrap();
    let mut per_position = Array2::zeros((rows, width));
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut total = 0.0f64;
    for r in 0..rows {
        for t in 0..width.saturating_sub(1) {
            if loss_mask[[r, t]] == 0 {
                continue;
            }
            let n = r * width + t;
            let target = ids[[r, t + 1]] as usize;
            let row = logits.row(n);
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            let nats = lse - row[target];
            per_position[[r, t]] = nats;
            total += nats.as_f64();
            let mut g = dlogits.row_mut(n);
            for (gv, &v) in g.iter_mut().zip(row.iter()) {
                *gv = (v - lse).exp() * inv_n;
            }
            g[target] -= inv_n;
        }
    }
    Ok((
        LossOutput {
            mean_nats: total / n_targets as f64,
            total_nats: total,
            n_targets,
            per_position,
        },
        dlogits,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let ids = arr2(&[[256u32, 65, 66, 257]]);
        let mask = arr2(&[[1u8, 1, 1, 0]]);
        let logits = Array2::<f64>::zeros((4, 259));
        let (l, _) = cross_entropy(&logits, &ids, &mask).unwrap();
        assert!((l.mean_nats - 259f64.ln()).abs() < 1e-12);
        assert_eq!(l.n_targets, 3);
    }

    #[test]
    fn confident_correct_logits_give_near_zero() {
        let ids = arr2(&[[1u32, 2, 0]]);
        let mask = arr2(&[[1u8, 1, 0]]);
        let mut logits = Array2::<f64>::zeros((3, 3));
        logits[[0, 2]] = 60.0;
        logits[[1, 0]] = 60.0;
        let (l, _) = cross_entropy(&logits, &ids, &mask).unwrap();
        assert!(l.mean_nats < 1e-20);
    }

    #[test]
    fn matches_direct_softmax() {
        let ids = arr2(&[[0u32, 2, 1], [1, 1, 0]]);
        let mask = arr2(&[[1u8, 1, 0], [1, 0, 0]]);
        let logits = arr2(&[
            [0.2f64, -1.0, 0.7],
            [1.5, 0.1, -0.3],
            [9.0, 9.0, 9.0],
            [-0.4, 0.9, 0.0],
            [2.0, 2.0, 2.0],
            [1.0, 1.0, 1.0],
        ]);
        let (l, _) = cross_entropy(&logits, &ids, &mask).unwrap();
        let nll = |row: usize, target: usize| {
            let z: f64 = logits.row(row).iter().map(|v| v.exp()).sum();
            -(logits[[row, target]].exp() / z).ln()
        };
        let expected = (nll(0, 2) + nll(1, 1) + nll(3, 1)) / 3.0;
        assert!((l.mean_nats - expected).abs() < 1e-12);
        assert!((l.per_position[[1, 0]] - nll(3, 1)).abs() < 1e-12);
    }

    #[test]
    fn all_masked_is_rejected() {
        let ids = arr2(&[[0u32, 1]]);
        let mask = arr2(&[[0u8, 0]]);
        assert!(cross_entropy(&Array2::<f32>::zeros((2, 2)), &ids, &mask).is_err());
    }
}
