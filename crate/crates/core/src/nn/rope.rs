use ndarray::{Array2, ArrayView2};

use crate::error::{invalid, shape, Result};
use crate::scalar::Scalar;

/// `base^(-2d / head_dim)` for each pair index `d`.
pub fn rope_frequencies(head_dim: usize, base: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|d| base.powf(-2.0 * d as f64 / head_dim as f64))
        .collect()
}

/// Rotates each pair `(2d, 2d+1)` of every row by `positions[row] * freq_d`.
///
/// `x` holds one head: `(seq, head_dim)`.
pub fn rope_rotate<F: Scalar>(x: ArrayView2<F>, positions: &[F], base: f64) -> Result<Array2<F>> {
    let head_dim = x.ncols();
    if head_dim % 2 != 0 {
        return Err(invalid(format!("head_dim must be even, got {head_dim}")));
    }
    if positions.len() != x.nrows() {
        return Err(shape(format!(
            "{} positions for {} rows",
            positions.len(),
            x.nrows()
        )));
    }
    let mut out = x.to_owned();
    rotate_heads(&mut out, positions, 1, head_dim, base, false);
    Ok(out)
}

/// In-place rotation of a `(rows, n_heads * head_dim)` projection. With
/// `inverse` the rotation angle is negated (used to pull gradients back).
pub fn rotate_heads<F: Scalar>(
    m: &mut Array2<F>,
    positions: &[F],
    n_heads: usize,
    head_dim: usize,
    base: f64,
    inverse: bool,
) {
    let freqs: Vec<F> = rope_frequencies(head_dim, base)
        .into_iter()
        .map(F::lit)
        .collect();
    let half = head_dim / 2;
    let mut cos = vec![F::zero(); half];
    let mut sin = vec![F::zero(); half];
    for (r, mut row) in m.rows_mut().into_iter().enumerate() {
        let p = positions[r];
        for d in 0..half {
            let theta = p * freqs[d];
            cos[d] = theta.cos();
            sin[d] = if inverse { -theta.sin() } else { theta.sin() };
        }
        for h in 0..n_heads {
            let off = h * head_dim;
            for d in 0..half {
                let a = row[off + 2 * d];
                let b = row[off + 2 * d + 1];
                row[off + 2 * d] = a * cos[d] - b * sin[d];
                row[off + 2 * d + 1] = a * sin[d] + b * cos[d];
            }
        }
    }
}

/// d(loss)/d(position) for each row, given the rotated values and the
/// gradient with respect to them.
pub fn rope_position_grad<F: Scalar>(
    rotated: &Array2<F>,
    grad_rotated: &Array2<F>,
    n_heads: usize,
    head_dim: usize,
    base: f64,
) -> Vec<F> {
    let freqs: Vec<F> = rope_frequencies(head_dim, base)
        .into_iter()
        .map(F::lit)
        .collect();
    rotated
        .rows()
        .into_iter()
        .zip(grad_rotated.rows())
        .map(|(y, g)| {
            let mut acc = F::zero();
            for h in 0..n_heads {
                let off = h * head_dim;
                for (d, &f) in freqs.iter().enumerate() {
                    let (y0, y1) = (y[off + 2 * d], y[off + 2 * d + 1]);
                    let (g0, g1) = (g[off + 2 * d], g[off + 2 * d + 1]);
                    acc += f * (g1 * y0 - g0 * y1);
                }
            }
            acc
        })
        .collect()
}
