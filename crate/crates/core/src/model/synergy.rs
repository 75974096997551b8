use std::ops::Range;

use ndarray::{Array2, Axis};
use rand::Rng;

use super::{check_ids, cross_entropy, Embeddings, LanguageModel, LossOutput, ModelConfig, ModelKind, ModelOutput, Routing};
use crate::corpus::Batch;
use crate::error::Result;
use crate::nn::{normal_matrix, rms_norm, rms_norm_backward, transformer_layer, LayerCache, LayerParams, NormCache};
use crate::router::{middle_positions_backward, router_weights, PositioningMode, RoutingState};
use crate::scalar::Scalar;

/// Encoder, router, middle and decoder stacks over a byte vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SynergyModel<F> {
    cfg: ModelConfig,
    pub(crate) emb: Embeddings<F>,
    pub enc: Vec<LayerParams<F>>,
    /// `(dim, 1)`, zero at init.
    pub router_weight: Array2<F>,
    /// `(1, 1)`, zero at init.
    pub router_bias: Array2<F>,
    pub mid: Vec<LayerParams<F>>,
    pub mid_norm: Array2<F>,
    /// Projection applied to the middle stack output before gating.
    pub mid_out: Array2<F>,
    pub dec: Vec<LayerParams<F>>,
    pub final_norm: Array2<F>,
}

/// Intermediate results of one forward pass.
#[derive(Debug, Clone)]
pub struct SynergyForward<F> {
    pub logits: Array2<F>,
    pub routing: Vec<RoutingState<F>>,
    /// `(rows * width, dim)`
    pub encoder_out: Array2<F>,
    /// Gated-in middle output, one row per picked token across the batch.
    pub middle_out: Array2<F>,
}

struct Cache<F> {
    enc: Vec<LayerCache<F>>,
    x: Array2<F>,
    routing: Vec<RoutingState<F>>,
    global_picked: Vec<usize>,
    mid_spans: Vec<Range<usize>>,
    mid_positions: Vec<F>,
    mid: Vec<LayerCache<F>>,
    mid_norm: NormCache<F>,
    mid_normed: Array2<F>,
    mid_out: Array2<F>,
    dec: Vec<LayerCache<F>>,
    final_norm: NormCache<F>,
    final_h: Array2<F>,
}

fn outer_positions<F: Scalar>(rows: usize, width: usize) -> Vec<F> {
    (0..rows)
        .flat_map(|_| (0..width).map(|t| F::from_usize(t).unwrap()))
        .collect()
}

fn run_stack<F: Scalar>(
    layers: &[LayerParams<F>],
    mut h: Array2<F>,
    spans: &[Range<usize>],
    positions: &[F],
    cfg: &crate::nn::BlockConfig,
) -> Result<(Array2<F>, Vec<LayerCache<F>>)> {
    let mut caches = Vec::with_capacity(layers.len());
    for p in layers {
        let (out, c) = transformer_layer(p, &h, spans, positions, cfg)?;
        caches.push(c);
        h = out;
    }
    Ok((h, caches))
}

pub(crate) fn push_stack<'a, F: Scalar>(
    name: &str,
    layers: &'a [LayerParams<F>],
    out: &mut Vec<(String, &'a Array2<F>)>,
) {
    for (i, l) in layers.iter().enumerate() {
        for (n, t) in l.tensors() {
            out.push((format!("{name}.{i}.{n}"), t));
        }
    }
}

pub(crate) fn push_stack_mut<'a, F: Scalar>(
    name: &str,
    layers: &'a mut [LayerParams<F>],
    out: &mut Vec<(String, &'a mut Array2<F>)>,
) {
    for (i, l) in layers.iter_mut().enumerate() {
        for (n, t) in l.tensors_mut() {
            out.push((format!("{name}.{i}.{n}"), t));
        }
    }
}

impl<F: Scalar> SynergyModel<F> {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.block.model_dim;
        let depth = cfg.total_layers();
        let emb = Embeddings::init(&cfg, rng);
        let stack = |n: usize, rng: &mut R| -> Vec<LayerParams<F>> {
            (0..n).map(|_| LayerParams::init(&cfg.block, depth, rng)).collect()
        };
        let enc = stack(cfg.enc_layers, rng);
        let mid = stack(cfg.mid_layers, rng);
        let dec = stack(cfg.dec_layers, rng);
        let mid_out = normal_matrix(d, d, 0.02 / (2.0 * depth as f64).sqrt(), rng);
        Ok(Self {
            emb,
            enc,
            router_weight: Array2::zeros((d, 1)),
            router_bias: Array2::zeros((1, 1)),
            mid,
            mid_norm: Array2::ones((1, d)),
            mid_out,
            dec,
            final_norm: Array2::ones((1, d)),
            cfg,
        })
    }

    pub fn embed(&self) -> &Array2<F> {
        &self.emb.embed
    }

    pub fn set_positioning(&mut self, mode: PositioningMode) {
        self.cfg.positioning = mode;
    }

    /// Middle stack on already gathered rows: layers, norm, output projection.
    pub fn middle(&self, xm: &Array2<F>, spans: &[Range<usize>], positions: &[F]) -> Result<Array2<F>> {
        let (h, _) = run_stack(&self.mid, xm.clone(), spans, positions, &self.cfg.middle_block())?;
        let (normed, _) = rms_norm(&h, &self.mid_norm);
        Ok(normed.dot(&self.mid_out))
    }

    /// Encoder followed directly by the decoder; the router and middle
    /// stack are skipped.
    pub fn forward_without_middle(&self, ids: &Array2<u32>) -> Result<Array2<F>> {
        check_ids(ids, &self.cfg)?;
        let (rows, width) = ids.dim();
        let spans = crate::nn::uniform_spans(rows, width);
        let pos = outer_positions::<F>(rows, width);
        let outer = self.cfg.outer_block();
        let (x, _) = run_stack(&self.enc, self.emb.lookup(ids), &spans, &pos, &outer)?;
        let (h, _) = run_stack(&self.dec, x, &spans, &pos, &outer)?;
        let (normed, _) = rms_norm(&h, &self.final_norm);
        Ok(self.emb.logits(&normed))
    }

    pub fn forward_detailed(
        &self,
        ids: &Array2<u32>,
        valid: Option<&Array2<u8>>,
        routing: Routing<F>,
    ) -> Result<SynergyForward<F>> {
        let (logits, cache) = self.forward_cached(ids, valid, routing)?;
        Ok(SynergyForward {
            logits,
            routing: cache.routing,
            encoder_out: cache.x,
            middle_out: cache.mid_out,
        })
    }

    /// Forward pass with the middle positions of each row replaced by
    /// `positions[row]` (treated as constants). Used to check the
    /// gradient-cut positioning modes against finite differences.
    pub fn forward_frozen_positions(
        &self,
        ids: &Array2<u32>,
        valid: Option<&Array2<u8>>,
        positions: &[Vec<F>],
    ) -> Result<ModelOutput<F>> {
        let (logits, cache) = self.forward_inner(ids, valid, Routing::TopK, Some(positions))?;
        Ok(ModelOutput {
            logits,
            routing: cache.routing,
        })
    }

    fn forward_cached(
        &self,
        ids: &Array2<u32>,
        valid: Option<&Array2<u8>>,
        routing: Routing<F>,
    ) -> Result<(Array2<F>, Cache<F>)> {
        self.forward_inner(ids, valid, routing, None)
    }

    fn forward_inner(
        &self,
        ids: &Array2<u32>,
        valid: Option<&Array2<u8>>,
        routing: Routing<F>,
        frozen_positions: Option<&[Vec<F>]>,
    ) -> Result<(Array2<F>, Cache<F>)> {
        check_ids(ids, &self.cfg)?;
        let (rows, width) = ids.dim();
        let spans = crate::nn::uniform_spans(rows, width);
        let pos = outer_positions::<F>(rows, width);
        let outer = self.cfg.outer_block();
        let mode = self.cfg.positioning;

        let (x, enc) = run_stack(&self.enc, self.emb.lookup(ids), &spans, &pos, &outer)?;

        let w = router_weights(&x, &self.router_weight, &self.router_bias)?;
        let mut states = Vec::with_capacity(rows);
        let mut global_picked = Vec::new();
        let mut mid_spans = Vec::with_capacity(rows);
        let mut mid_positions = Vec::new();
        for r in 0..rows {
            let w_row = w[r * width..(r + 1) * width].to_vec();
            let valid_row: Vec<bool> = match valid {
                Some(v) => v.row(r).iter().map(|&b| b != 0).collect(),
                None => vec![true; width],
            };
            let mut st = match routing {
                Routing::TopK => RoutingState::top_k(w_row, self.cfg.k, &valid_row, mode)?,
                Routing::Threshold(t) => RoutingState::threshold(w_row, t, &valid_row, mode),
            };
            if let Some(frozen) = frozen_positions {
                let p = frozen.get(r).ok_or_else(|| crate::error::shape("missing frozen positions"))?;
                if p.len() != st.picked.len() {
                    return Err(crate::error::shape("frozen positions do not match picked count"));
                }
                st.middle_positions = p.clone();
            }
            let start = global_picked.len();
            global_picked.extend(st.picked.iter().map(|&i| r * width + i));
            mid_spans.push(start..global_picked.len());
            mid_positions.extend_from_slice(&st.middle_positions);
            states.push(st);
        }

        let xm = x.select(Axis(0), &global_picked);
        let (hm, mid) = run_stack(&self.mid, xm, &mid_spans, &mid_positions, &self.cfg.middle_block())?;
        let (mid_normed, mid_norm) = rms_norm(&hm, &self.mid_norm);
        let mid_out = mid_normed.dot(&self.mid_out);

        let mut y = x.clone();
        for (r, &g) in global_picked.iter().enumerate() {
            let s = states[g / width].sigma[g % width];
            let mut row = y.row_mut(g);
            for (v, &m) in row.iter_mut().zip(mid_out.row(r)) {
                *v += s * m;
            }
        }

        let (h, dec) = run_stack(&self.dec, y, &spans, &pos, &outer)?;
        let (final_h, final_norm) = rms_norm(&h, &self.final_norm);
        let logits = self.emb.logits(&final_h);
        Ok((
            logits,
            Cache {
                enc,
                x,
                routing: states,
                global_picked,
                mid_spans,
                mid_positions,
                mid,
                mid_norm,
                mid_normed,
                mid_out,
                dec,
                final_norm,
                final_h,
            },
        ))
    }

    fn backward(&self, ids: &Array2<u32>, cache: &Cache<F>, dlogits: &Array2<F>) -> Self {
        let (rows, width) = ids.dim();
        let spans = crate::nn::uniform_spans(rows, width);
        let pos = outer_positions::<F>(rows, width);
        let outer = self.cfg.outer_block();
        let mid_cfg = self.cfg.middle_block();
        let mode = self.cfg.positioning;
        let mut g = self.zeros_like();

        let dfinal = self.emb.logits_backward(&cache.final_h, dlogits, &mut g.emb);
        let mut dy = rms_norm_backward(&cache.final_norm, &self.final_norm, &dfinal, &mut g.final_norm);
        for i in (0..self.dec.len()).rev() {
            dy = cache.dec[i]
                .backward(&self.dec[i], &dy, &spans, &pos, &outer, &mut g.dec[i], false)
                .0;
        }

        // gated scatter: y_g = x_g + σ_g · mid_out_r
        let n = rows * width;
        let mut dsigma = vec![F::zero(); n];
        let mut dmid = Array2::zeros(cache.mid_out.raw_dim());
        for (r, &gi) in cache.global_picked.iter().enumerate() {
            let s = cache.routing[gi / width].sigma[gi % width];
            let dyr = dy.row(gi);
            let mo = cache.mid_out.row(r);
            dsigma[gi] = dyr.iter().zip(mo.iter()).map(|(&a, &b)| a * b).sum();
            dmid.row_mut(r).assign(&dyr.mapv(|v| v * s));
        }
        let mut dx = dy;

        g.mid_out += &cache.mid_normed.t().dot(&dmid);
        let dnormed = dmid.dot(&self.mid_out.t());
        let mut dhm = rms_norm_backward(&cache.mid_norm, &self.mid_norm, &dnormed, &mut g.mid_norm);
        let mut dpos = vec![F::zero(); cache.mid_positions.len()];
        let want_pos = mode.keeps_gradient();
        for i in (0..self.mid.len()).rev() {
            let (d, pg) = cache.mid[i].backward(
                &self.mid[i],
                &dhm,
                &cache.mid_spans,
                &cache.mid_positions,
                &mid_cfg,
                &mut g.mid[i],
                want_pos,
            );
            dhm = d;
            if let Some(pg) = pg {
                for (a, b) in dpos.iter_mut().zip(pg) {
                    *a += b;
                }
            }
        }
        for (r, &gi) in cache.global_picked.iter().enumerate() {
            let mut row = dx.row_mut(gi);
            row += &dhm.row(r);
        }
        if want_pos {
            for (row, (st, span)) in cache.routing.iter().zip(&cache.mid_spans).enumerate() {
                let ds = middle_positions_backward(&dpos[span.clone()], &st.picked, width, mode);
                for (t, v) in ds.into_iter().enumerate() {
                    dsigma[row * width + t] += v;
                }
            }
        }

        // σ = sigmoid(w), w = x · r + b
        let dw: Vec<F> = (0..n)
            .map(|i| {
                let s = cache.routing[i / width].sigma[i % width];
                dsigma[i] * s * (F::one() - s)
            })
            .collect();
        let dw_col = Array2::from_shape_vec((n, 1), dw).expect("column shape");
        g.router_weight += &cache.x.t().dot(&dw_col);
        g.router_bias[[0, 0]] += dw_col.sum();
        dx += &dw_col.dot(&self.router_weight.t());

        for i in (0..self.enc.len()).rev() {
            dx = cache.enc[i]
                .backward(&self.enc[i], &dx, &spans, &pos, &outer, &mut g.enc[i], false)
                .0;
        }
        self.emb.lookup_backward(ids, &dx, &mut g.emb);
        g
    }
}

impl<F: Scalar> LanguageModel<F> for SynergyModel<F> {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Synergy
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
        push_stack("enc", &self.enc, &mut out);
        out.push(("router.weight".into(), &self.router_weight));
        out.push(("router.bias".into(), &self.router_bias));
        push_stack("mid", &self.mid, &mut out);
        out.push(("mid_norm".into(), &self.mid_norm));
        out.push(("mid_out".into(), &self.mid_out));
        push_stack("dec", &self.dec, &mut out);
        out.push(("final_norm".into(), &self.final_norm));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<F>)> {
        let mut out = Vec::new();
        self.emb.push_tensors_mut(&mut out);
        push_stack_mut("enc", &mut self.enc, &mut out);
        out.push(("router.weight".into(), &mut self.router_weight));
        out.push(("router.bias".into(), &mut self.router_bias));
        push_stack_mut("mid", &mut self.mid, &mut out);
        out.push(("mid_norm".into(), &mut self.mid_norm));
        out.push(("mid_out".into(), &mut self.mid_out));
        push_stack_mut("dec", &mut self.dec, &mut out);
        out.push(("final_norm".into(), &mut self.final_norm));
        out
    }

    fn forward(&self, ids: &Array2<u32>, valid: Option<&Array2<u8>>, routing: Routing<F>) -> Result<ModelOutput<F>> {
        let (logits, cache) = self.forward_cached(ids, valid, routing)?;
        Ok(ModelOutput {
            logits,
            routing: cache.routing,
        })
    }

    fn loss_and_grad(&self, batch: &Batch) -> Result<(LossOutput<F>, Self, Vec<RoutingState<F>>)> {
        let (logits, cache) = self.forward_cached(&batch.ids, Some(&batch.valid), Routing::TopK)?;
        let (loss, dlogits) = cross_entropy(&logits, &batch.ids, &batch.loss_mask)?;
        let grads = self.backward(&batch.ids, &cache, &dlogits);
        Ok((loss, grads, cache.routing))
    }
}
