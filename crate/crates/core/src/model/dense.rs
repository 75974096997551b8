use ndarray::Array2;
use rand::Rng;

use super::synergy::{push_stack, push_stack_mut};
use super::{check_ids, cross_entropy, Embeddings, LanguageModel, LossOutput, ModelConfig, ModelKind, ModelOutput, Routing};
use crate::corpus::Batch;
use crate::error::Result;
use crate::nn::{rms_norm, rms_norm_backward, transformer_layer, uniform_spans, LayerParams};
use crate::router::RoutingState;
use crate::scalar::Scalar;

/// Plain decoder-only stack with `enc + mid + dec` layers, full causal
/// attention and rotary positions. Works over any vocabulary size.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel<F> {
    cfg: ModelConfig,
    pub(crate) emb: Embeddings<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Array2<F>,
}

impl<F: Scalar> DenseModel<F> {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.block.validate()?;
        let depth = cfg.total_layers();
        let emb = Embeddings::init(&cfg, rng);
        let layers = (0..depth)
            .map(|_| LayerParams::init(&cfg.block, depth, rng))
            .collect();
        Ok(Self {
            emb,
            layers,
            final_norm: Array2::ones((1, cfg.block.model_dim)),
            cfg,
        })
    }

    fn positions(rows: usize, width: usize) -> Vec<F> {
        (0..rows)
            .flat_map(|_| (0..width).map(|t| F::from_usize(t).unwrap()))
            .collect()
    }
}

impl<F: Scalar> LanguageModel<F> for DenseModel<F> {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Dense
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    fn tensors(&self) -> Vec<(String, &Array2<F>)> {
        let mut out = Vec::new();
        self.emb.push_tensors(&mut out);
        push_stack("layers", &self.layers, &mut out);
        out.push(("final_norm".into(), &self.final_norm));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<F>)> {
        let mut out = Vec::new();
        self.emb.push_tensors_mut(&mut out);
        push_stack_mut("layers", &mut self.layers, &mut out);
        out.push(("final_norm".into(), &mut self.final_norm));
        out
    }

    fn forward(&self, ids: &Array2<u32>, _valid: Option<&Array2<u8>>, _routing: Routing<F>) -> Result<ModelOutput<F>> {
        check_ids(ids, &self.cfg)?;
        let (rows, width) = ids.dim();
        let spans = uniform_spans(rows, width);
        let pos = Self::positions(rows, width);
        let block = self.cfg.dense_block();
        let mut h = self.emb.lookup(ids);
        for l in &self.layers {
            h = transformer_layer(l, &h, &spans, &pos, &block)?.0;
        }
        let (normed, _) = rms_norm(&h, &self.final_norm);
        Ok(ModelOutput {
            logits: self.emb.logits(&normed),
            routing: Vec::new(),
        })
    }

    fn loss_and_grad(&self, batch: &Batch) -> Result<(LossOutput<F>, Self, Vec<RoutingState<F>>)> {
        let ids = &batch.ids;
        check_ids(ids, &self.cfg)?;
        let (rows, width) = ids.dim();
        let spans = uniform_spans(rows, width);
        let pos = Self::positions(rows, width);
        let block = self.cfg.dense_block();
        let mut h = self.emb.lookup(ids);
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (out, c) = transformer_layer(l, &h, &spans, &pos, &block)?;
            caches.push(c);
            h = out;
        }
        let (normed, norm_cache) = rms_norm(&h, &self.final_norm);
        let logits = self.emb.logits(&normed);
        let (loss, dlogits) = cross_entropy(&logits, ids, &batch.loss_mask)?;

        let mut g = self.zeros_like();
        let dn = self.emb.logits_backward(&normed, &dlogits, &mut g.emb);
        let mut dh = rms_norm_backward(&norm_cache, &self.final_norm, &dn, &mut g.final_norm);
        for i in (0..self.layers.len()).rev() {
            dh = caches[i]
                .backward(&self.layers[i], &dh, &spans, &pos, &block, &mut g.layers[i], false)
                .0;
        }
        self.emb.lookup_backward(ids, &dh, &mut g.emb);
        Ok((loss, g, Vec::new()))
    }
}
