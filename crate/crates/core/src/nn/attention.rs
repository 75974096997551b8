use std::ops::Range;

use ndarray::{s, Array2};

use super::rope::{rope_position_grad, rotate_heads};
use super::{AttnPositioning, BlockConfig};
use crate::error::{shape, Result};
use crate::scalar::Scalar;

/// Projection weights of one attention block, all `(dim, dim)`, no biases.
/// The same shape doubles as the gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights<F> {
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct AttnCache<F> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Softmax weights per (span, head), `(len, len)`.
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
}

/// Query blocks and the key range each block can reach.
fn blocks(len: usize, window: Option<usize>) -> Vec<(Range<usize>, Range<usize>)> {
    let bq = window.map_or(len, |w| w.max(16)).clamp(1, len.max(1));
    (0..len)
        .step_by(bq)
        .map(|a| {
            let b = (a + bq).min(len);
            let lo = window.map_or(0, |w| (a + 1).saturating_sub(w));
            (a..b, lo..b)
        })
        .collect()
}

/// First key visible from query `i`.
fn first_key(i: usize, window: Option<usize>) -> usize {
    window.map_or(0, |w| (i + 1).saturating_sub(w))
}

/// Multi-head causal self-attention over every span of `x`.
///
/// Position `i` attends to `j` with `max(0, i - window + 1) <= j <= i`
/// inside its own span. Rotary encoding (if any) applies to queries and
/// keys only.
pub fn causal_attention<F: Scalar>(
    w: &AttnWeights<F>,
    x: &Array2<F>,
    spans: &[Range<usize>],
    positions: &[F],
    cfg: &BlockConfig,
) -> Result<(Array2<F>, AttnCache<F>)> {
    if positions.len() != x.nrows() {
        return Err(shape(format!(
            "{} positions for {} rows",
            positions.len(),
            x.nrows()
        )));
    }
    if x.ncols() != cfg.model_dim {
        return Err(shape(format!(
            "input dim {} != model_dim {}",
            x.ncols(),
            cfg.model_dim
        )));
    }
    let (nh, hd) = (cfg.n_heads, cfg.head_dim);
    let mut q = x.dot(&w.wq);
    let mut k = x.dot(&w.wk);
    let v = x.dot(&w.wv);
    if cfg.positioning != AttnPositioning::None {
        rotate_heads(&mut q, positions, nh, hd, cfg.rope_base, false);
        rotate_heads(&mut k, positions, nh, hd, cfg.rope_base, false);
    }
    let scale = F::one() / F::from_usize(hd).unwrap().sqrt();
    let mut ctx = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(spans.len() * nh);
    for span in spans {
        let len = span.len();
        let off = span.start;
        let bl = blocks(len, cfg.window);
        for h in 0..nh {
            let cols = h * hd..(h + 1) * hd;
            let mut p = Array2::zeros((len, len));
            for (qr, kr) in &bl {
                let qh = q.slice(s![off + qr.start..off + qr.end, cols.clone()]);
                let kh = k.slice(s![off + kr.start..off + kr.end, cols.clone()]);
                let mut sc = qh.dot(&kh.t());
                for (r, i) in qr.clone().enumerate() {
                    let row = sc.row_mut(r).into_slice().unwrap();
                    let (lo, hi) = (first_key(i, cfg.window) - kr.start, i + 1 - kr.start);
                    let live = &mut row[lo..hi];
                    let max = live.iter().fold(F::neg_infinity(), |m, &v| m.max(v * scale));
                    let mut sum = F::zero();
                    for e in live.iter_mut() {
                        *e = (*e * scale - max).exp();
                        sum += *e;
                    }
                    let inv = F::one() / sum;
                    live.iter_mut().for_each(|e| *e *= inv);
                    row[..lo].fill(F::zero());
                    row[hi..].fill(F::zero());
                }
                let vh = v.slice(s![off + kr.start..off + kr.end, cols.clone()]);
                ctx.slice_mut(s![off + qr.start..off + qr.end, cols.clone()])
                    .assign(&sc.dot(&vh));
                p.slice_mut(s![qr.clone(), kr.clone()]).assign(&sc);
            }
            probs.push(p);
        }
    }
    let out = ctx.dot(&w.wo);
    Ok((
        out,
        AttnCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            ctx,
        },
    ))
}

impl<F: Scalar> AttnCache<F> {
    /// Accumulates weight gradients into `grads` and returns the input
    /// gradient plus, when requested, the gradient per position.
    pub fn backward(
        &self,
        w: &AttnWeights<F>,
        dout: &Array2<F>,
        spans: &[Range<usize>],
        positions: &[F],
        cfg: &BlockConfig,
        grads: &mut AttnWeights<F>,
        want_position_grad: bool,
    ) -> (Array2<F>, Option<Vec<F>>) {
        let (nh, hd) = (cfg.n_heads, cfg.head_dim);
        let scale = F::one() / F::from_usize(hd).unwrap().sqrt();
        grads.wo += &self.ctx.t().dot(dout);
        let dctx = dout.dot(&w.wo.t());
        let mut dq = Array2::zeros(self.q.raw_dim());
        let mut dk = Array2::zeros(self.k.raw_dim());
        let mut dv = Array2::zeros(self.v.raw_dim());
        let mut pi = 0;
        for span in spans {
            let len = span.len();
            let off = span.start;
            let bl = blocks(len, cfg.window);
            for h in 0..nh {
                let cols = h * hd..(h + 1) * hd;
                let p = &self.probs[pi];
                pi += 1;
                for (qr, kr) in &bl {
                    let rows_q = off + qr.start..off + qr.end;
                    let rows_k = off + kr.start..off + kr.end;
                    let pb = p.slice(s![qr.clone(), kr.clone()]);
                    let qh = self.q.slice(s![rows_q.clone(), cols.clone()]);
                    let kh = self.k.slice(s![rows_k.clone(), cols.clone()]);
                    let vh = self.v.slice(s![rows_k.clone(), cols.clone()]);
                    let dch = dctx.slice(s![rows_q.clone(), cols.clone()]);
                    let mut dvb = dv.slice_mut(s![rows_k.clone(), cols.clone()]);
                    dvb += &pb.t().dot(&dch);
                    let mut ds = dch.dot(&vh.t());
                    for (r, i) in qr.clone().enumerate() {
                        let prow = pb.row(r);
                        let prow = prow.as_slice().unwrap();
                        let drow = ds.row_mut(r).into_slice().unwrap();
                        let (lo, hi) = (first_key(i, cfg.window) - kr.start, i + 1 - kr.start);
                        let dot: F = (lo..hi).map(|j| prow[j] * drow[j]).sum();
                        for j in lo..hi {
                            drow[j] = prow[j] * (drow[j] - dot) * scale;
                        }
                        drow[..lo].fill(F::zero());
                        drow[hi..].fill(F::zero());
                    }
                    dq.slice_mut(s![rows_q, cols.clone()]).assign(&ds.dot(&kh));
                    let mut dkb = dk.slice_mut(s![rows_k, cols.clone()]);
                    dkb += &ds.t().dot(&qh);
                }
            }
        }
        let mut pos_grad = None;
        if cfg.positioning != AttnPositioning::None {
            if want_position_grad {
                let gq = rope_position_grad(&self.q, &dq, nh, hd, cfg.rope_base);
                let gk = rope_position_grad(&self.k, &dk, nh, hd, cfg.rope_base);
                pos_grad = Some(gq.into_iter().zip(gk).map(|(a, b)| a + b).collect());
            }
            rotate_heads(&mut dq, positions, nh, hd, cfg.rope_base, true);
            rotate_heads(&mut dk, positions, nh, hd, cfg.rope_base, true);
        }
        grads.wq += &self.x.t().dot(&dq);
        grads.wk += &self.x.t().dot(&dk);
        grads.wv += &self.x.t().dot(&dv);
        let mut dx = dq.dot(&w.wq.t());
        dx += &dk.dot(&w.wk.t());
        dx += &dv.dot(&w.wv.t());
        (dx, pos_grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(window: Option<usize>, positioning: AttnPositioning) -> BlockConfig {
        BlockConfig {
            model_dim: 8,
            n_heads: 2,
            head_dim: 4,
            mlp_dim: 16,
            window,
            positioning,
            rope_base: 10000.0,
        }
    }

    fn weights(seed: u64) -> AttnWeights<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttnWeights {
            wq: normal_matrix(8, 8, 0.5, &mut rng),
            wk: normal_matrix(8, 8, 0.5, &mut rng),
            wv: normal_matrix(8, 8, 0.5, &mut rng),
            wo: normal_matrix(8, 8, 0.5, &mut rng),
        }
    }

    fn positions(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64).collect()
    }

    #[test]
    fn single_token_is_value_projection() {
        let w = weights(1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Array2<f64> = normal_matrix(1, 8, 1.0, &mut rng);
        let c = cfg(None, AttnPositioning::Rotary);
        let (out, _) = causal_attention(&w, &x, &[0..1], &[0.0], &c).unwrap();
        let expected = x.dot(&w.wv).dot(&w.wo);
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn window_one_is_per_token_value_path() {
        let w = weights(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Array2<f64> = normal_matrix(5, 8, 1.0, &mut rng);
        let c = cfg(Some(1), AttnPositioning::Rotary);
        let (out, _) = causal_attention(&w, &x, &[0..5], &positions(5), &c).unwrap();
        let expected = x.dot(&w.wv).dot(&w.wo);
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_and_local_under_perturbation() {
        let w = weights(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Array2<f64> = normal_matrix(7, 8, 1.0, &mut rng);
        let win = 3;
        let c = cfg(Some(win), AttnPositioning::Rotary);
        let pos = positions(7);
        let (base, _) = causal_attention(&w, &x, &[0..7], &pos, &c).unwrap();
        for j in 0..7 {
            let mut xp = x.clone();
            xp.row_mut(j).mapv_inplace(|v| v + 1.0);
            let (out, _) = causal_attention(&w, &xp, &[0..7], &pos, &c).unwrap();
            for i in 0..7 {
                let changed = (0..8).any(|d| (out[[i, d]] - base[[i, d]]).abs() > 1e-12);
                let in_reach = j <= i && i - j < win;
                assert_eq!(changed, in_reach, "i={i} j={j}");
            }
        }
    }

    #[test]
    fn spans_are_independent() {
        let w = weights(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Array2<f64> = normal_matrix(6, 8, 1.0, &mut rng);
        let c = cfg(None, AttnPositioning::Rotary);
        let pos = [0.0, 1.0, 2.0, 0.0, 1.0, 2.0];
        let (both, _) = causal_attention(&w, &x, &[0..3, 3..6], &pos, &c).unwrap();
        let second = x.slice(s![3..6, ..]).to_owned();
        let (alone, _) = causal_attention(&w, &second, &[0..3], &pos[..3], &c).unwrap();
        assert_eq!(both.slice(s![3..6, ..]), alone);
    }

    #[test]
    fn no_positioning_ignores_positions() {
        let w = weights(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Array2<f64> = normal_matrix(4, 8, 1.0, &mut rng);
        let c = cfg(None, AttnPositioning::None);
        let (a, _) = causal_attention(&w, &x, &[0..4], &positions(4), &c).unwrap();
        let (b, _) = causal_attention(&w, &x, &[0..4], &[5.0, 0.3, 9.9, -2.0], &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn position_length_mismatch() {
        let w = weights(1);
        let x = Array2::<f64>::zeros((3, 8));
        let c = cfg(None, AttnPositioning::Rotary);
        assert!(causal_attention(&w, &x, &[0..3], &[0.0, 1.0], &c).is_err());
    }
}
