use ndarray::Array2;

use crate::scalar::Scalar;

const EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct NormCache<F> {
    x: Array2<F>,
    inv_rms: Vec<F>,
}

/// RMS normalization with a learned per-channel gain of shape `(1, dim)`.
pub fn rms_norm<F: Scalar>(x: &Array2<F>, gain: &Array2<F>) -> (Array2<F>, NormCache<F>) {
    let dim = x.ncols();
    let d = F::from_usize(dim).unwrap();
    let eps = F::lit(EPS);
    let x = x.as_standard_layout().into_owned();
    let g = gain.as_standard_layout();
    let g = g.as_slice().unwrap();
    let mut inv_rms = Vec::with_capacity(x.nrows());
    let mut y = x.clone();
    for row in y.as_slice_mut().unwrap().chunks_exact_mut(dim.max(1)) {
        let ms = row.iter().map(|&v| v * v).sum::<F>() / d;
        let inv = F::one() / (ms + eps).sqrt();
        inv_rms.push(inv);
        for (v, &gi) in row.iter_mut().zip(g) {
            *v = *v * inv * gi;
        }
    }
    (y, NormCache { x, inv_rms })
}

pub fn rms_norm_backward<F: Scalar>(
    cache: &NormCache<F>,
    gain: &Array2<F>,
    dy: &Array2<F>,
    dgain: &mut Array2<F>,
) -> Array2<F> {
    let dim = cache.x.ncols();
    let d = F::from_usize(dim).unwrap();
    let g = gain.as_standard_layout();
    let g = g.as_slice().unwrap();
    let dy = dy.as_standard_layout();
    let mut dx = Array2::zeros(cache.x.raw_dim());
    let mut dg = vec![F::zero(); dim];
    let rows = cache
        .x
        .as_slice()
        .unwrap()
        .chunks_exact(dim.max(1))
        .zip(dy.as_slice().unwrap().chunks_exact(dim.max(1)))
        .zip(dx.as_slice_mut().unwrap().chunks_exact_mut(dim.max(1)));
    for (r, ((xr, dyr), out)) in rows.enumerate() {
        let inv = cache.inv_rms[r];
        // xhat = x * inv; dxhat = dy * g
        let mut dot = F::zero();
        for c in 0..dim {
            let xhat = xr[c] * inv;
            dg[c] += dyr[c] * xhat;
            dot += dyr[c] * g[c] * xhat;
        }
        let mean = dot / d;
        for c in 0..dim {
            out[c] = inv * (dyr[c] * g[c] - xr[c] * inv * mean);
        }
    }
    for (acc, v) in dgain.iter_mut().zip(dg) {
        *acc += v;
    }
    dx
}
