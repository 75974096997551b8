use std::ops::Range;

use ndarray::Array2;
use rand::Rng;

use super::attention::{causal_attention, AttnCache, AttnWeights};
use super::mlp::{swiglu_mlp, MlpCache};
use super::norm::{rms_norm, rms_norm_backward, NormCache};
use super::{normal_matrix, BlockConfig};
use crate::error::Result;
use crate::scalar::Scalar;

/// Weights of a pre-norm transformer layer. Also used as its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub attn_norm: Array2<F>,
    pub attn: AttnWeights<F>,
    pub mlp_norm: Array2<F>,
    pub w_gate: Array2<F>,
    pub w_up: Array2<F>,
    pub w_down: Array2<F>,
}

impl<F: Scalar> LayerParams<F> {
    pub fn zeros(cfg: &BlockConfig) -> Self {
        let (d, m) = (cfg.model_dim, cfg.mlp_dim);
        Self {
            attn_norm: Array2::zeros((1, d)),
            attn: AttnWeights {
                wq: Array2::zeros((d, d)),
                wk: Array2::zeros((d, d)),
                wv: Array2::zeros((d, d)),
                wo: Array2::zeros((d, d)),
            },
            mlp_norm: Array2::zeros((1, d)),
            w_gate: Array2::zeros((d, m)),
            w_up: Array2::zeros((d, m)),
            w_down: Array2::zeros((m, d)),
        }
    }

    /// Normal init with std 0.02; residual output projections use
    /// `0.02 / sqrt(2 * depth)`.
    pub fn init<R: Rng + ?Sized>(cfg: &BlockConfig, depth: usize, rng: &mut R) -> Self {
        let (d, m) = (cfg.model_dim, cfg.mlp_dim);
        let std = 0.02;
        let out_std = std / (2.0 * depth.max(1) as f64).sqrt();
        Self {
            attn_norm: Array2::ones((1, d)),
            attn: AttnWeights {
                wq: normal_matrix(d, d, std, rng),
                wk: normal_matrix(d, d, std, rng),
                wv: normal_matrix(d, d, std, rng),
                wo: normal_matrix(d, d, out_std, rng),
            },
            mlp_norm: Array2::ones((1, d)),
            w_gate: normal_matrix(d, m, std, rng),
            w_up: normal_matrix(d, m, std, rng),
            w_down: normal_matrix(m, d, out_std, rng),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Array2<F>)> {
        vec![
            ("attn_norm", &self.attn_norm),
            ("wq", &self.attn.wq),
            ("wk", &self.attn.wk),
            ("wv", &self.attn.wv),
            ("wo", &self.attn.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Array2<F>)> {
        vec![
            ("attn_norm", &mut self.attn_norm),
            ("wq", &mut self.attn.wq),
            ("wk", &mut self.attn.wk),
            ("wv", &mut self.attn.wv),
            ("wo", &mut self.attn.wo),
            ("mlp_norm", &mut self.mlp_norm),
            ("w_gate", &mut self.w_gate),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache<F> {
    norm1: NormCache<F>,
    attn: AttnCache<F>,
    norm2: NormCache<F>,
    mlp: MlpCache<F>,
}

/// `h = x + attn(norm(x)); out = h + mlp(norm(h))`.
pub fn transformer_layer<F: Scalar>(
    p: &LayerParams<F>,
    x: &Array2<F>,
    spans: &[Range<usize>],
    positions: &[F],
    cfg: &BlockConfig,
) -> Result<(Array2<F>, LayerCache<F>)> {
    let (n1, norm1) = rms_norm(x, &p.attn_norm);
    let (a, attn) = causal_attention(&p.attn, &n1, spans, positions, cfg)?;
    let h = x + &a;
    let (n2, norm2) = rms_norm(&h, &p.mlp_norm);
    let (m, mlp) = swiglu_mlp(&n2, &p.w_gate, &p.w_up, &p.w_down)?;
    let out = h + &m;
    Ok((
        out,
        LayerCache {
            norm1,
            attn,
            norm2,
            mlp,
        },
    ))
}

impl<F: Scalar> LayerCache<F> {
    pub fn backward(
        &self,
        p: &LayerParams<F>,
        dout: &Array2<F>,
        spans: &[Range<usize>],
        positions: &[F],
        cfg: &BlockConfig,
        grads: &mut LayerParams<F>,
        want_position_grad: bool,
    ) -> (Array2<F>, Option<Vec<F>>) {
        let dn2 = self.mlp.backward(
            &p.w_gate,
            &p.w_up,
            &p.w_down,
            dout,
            &mut grads.w_gate,
            &mut grads.w_up,
            &mut grads.w_down,
        );
        let mut dh = rms_norm_backward(&self.norm2, &p.mlp_norm, &dn2, &mut grads.mlp_norm);
        dh += dout;
        let (dn1, pos_grad) = self.attn.backward(
            &p.attn,
            &dh,
            spans,
            positions,
            cfg,
            &mut grads.attn,
            want_position_grad,
        );
        let mut dx = rms_norm_backward(&self.norm1, &p.attn_norm, &dn1, &mut grads.attn_norm);
        dx += &dh;
        (dx, pos_grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AttnPositioning;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(window: Option<usize>) -> BlockConfig {
        BlockConfig {
            model_dim: 8,
            n_heads: 2,
            head_dim: 4,
            mlp_dim: 12,
            window,
            positioning: AttnPositioning::RotaryReal,
            rope_base: 10000.0,
        }
    }

    fn random_layer(c: &BlockConfig, seed: u64) -> LayerParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = LayerParams::init(c, 1, &mut rng);
        // larger weights make every term of the gradient visible
        for (_, t) in p.tensors_mut() {
            let noise: Array2<f64> = normal_matrix(t.nrows(), t.ncols(), 0.4, &mut rng);
            *t += &noise;
        }
        p
    }

    #[test]
    fn zero_output_projections_make_identity() {
        let c = cfg(Some(3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = LayerParams::<f64>::init(&c, 4, &mut rng);
        p.attn.wo.fill(0.0);
        p.w_down.fill(0.0);
        let x: Array2<f64> = normal_matrix(5, 8, 1.0, &mut rng);
        let pos: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let (y, _) = transformer_layer(&p, &x, &[0..5], &pos, &c).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn finite_difference_gradients() {
        let c = cfg(Some(3));
        let p = random_layer(&c, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x: Array2<f64> = normal_matrix(6, 8, 1.0, &mut rng);
        let weights: Array2<f64> = normal_matrix(6, 8, 1.0, &mut rng);
        let spans = [0..4, 4..6];
        let pos = vec![0.3, 1.1, 1.7, 2.9, 0.5, 1.4];
        let loss = |p: &LayerParams<f64>, x: &Array2<f64>, pos: &[f64]| {
            let (y, _) = transformer_layer(p, x, &spans, pos, &c).unwrap();
            (&y * &weights).sum()
        };
        let (_, cache) = transformer_layer(&p, &x, &spans, &pos, &c).unwrap();
        let mut grads = LayerParams::zeros(&c);
        let (dx, dpos) = cache.backward(&p, &weights, &spans, &pos, &c, &mut grads, true);
        let dpos = dpos.unwrap();
        let h = 1e-5;
        let check = |analytic: f64, numeric: f64, what: &str| {
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / denom < 1e-5,
                "{what}: {analytic} vs {numeric}"
            );
        };
        for r in 0..6 {
            for d in [0, 5] {
                let mut xp = x.clone();
                xp[[r, d]] += h;
                let mut xm = x.clone();
                xm[[r, d]] -= h;
                check(dx[[r, d]], (loss(&p, &xp, &pos) - loss(&p, &xm, &pos)) / (2.0 * h), "dx");
            }
            let mut pp = pos.clone();
            pp[r] += h;
            let mut pm = pos.clone();
            pm[r] -= h;
            check(dpos[r], (loss(&p, &x, &pp) - loss(&p, &x, &pm)) / (2.0 * h), "dpos");
        }
        let names: Vec<&str> = p.tensors().iter().map(|(n, _)| *n).collect();
        for (ti, name) in names.iter().enumerate() {
            let shape = p.tensors()[ti].1.dim();
            for idx in [(0, 0), (shape.0 - 1, shape.1 - 1), (0, shape.1 / 2)] {
                let bump = |delta: f64| {
                    let mut q = p.clone();
                    q.tensors_mut()[ti].1[idx] += delta;
                    loss(&q, &x, &pos)
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                check(grads.tensors()[ti].1[idx], numeric, name);
            }
        }
    }
}
