//! Token routing between the encoder and the middle stack.
//!
//! Per token: `w = x·r + b`, a top-k mask over `w`, a gate `σ = sigmoid(w)`,
//! and `y = x + m·σ·Middle(x)`. The mask carries no gradient; the router
//! learns only through σ (and, in the `*_grad` modes, through the
//! σ-derived middle positions).

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::nn::AttnPositioning;
use crate::scalar::{sigmoid, Scalar};

/// Rule assigning positions to the compressed middle sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositioningMode {
    /// Original byte index of each picked token.
    Original,
    /// Running sum of σ over picked tokens, gradient cut.
    Sigma,
    /// Running sum of σ over picked tokens, gradient kept.
    SigmaGrad,
    /// Running sum of σ over all tokens, sampled at picked tokens, gradient cut.
    SigmaAll,
    /// Running sum of σ over all tokens, gradient kept.
    SigmaAllGrad,
    /// No positional encoding in the middle stack.
    None,
}

impl PositioningMode {
    pub const ALL: [PositioningMode; 6] = [
        PositioningMode::Original,
        PositioningMode::Sigma,
        PositioningMode::SigmaGrad,
        PositioningMode::SigmaAll,
        PositioningMode::SigmaAllGrad,
        PositioningMode::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::Sigma => "sigma",
            Self::SigmaGrad => "sigma_grad",
            Self::SigmaAll => "sigma_all",
            Self::SigmaAllGrad => "sigma_all_grad",
            Self::None => "none",
        }
    }

    /// Attention positioning used by the middle stack under this mode.
    pub fn attn_positioning(self) -> AttnPositioning {
        match self {
            Self::Original => AttnPositioning::Rotary,
            Self::None => AttnPositioning::None,
            _ => AttnPositioning::RotaryReal,
        }
    }

    pub fn keeps_gradient(self) -> bool {
        matches!(self, Self::SigmaGrad | Self::SigmaAllGrad)
    }

    fn sums_all_tokens(self) -> bool {
        matches!(self, Self::SigmaAll | Self::SigmaAllGrad)
    }

    /// BPB reported for each mode at 5.5T tokens on the full-scale model.
    /// Reference annotation only.
    pub fn reference_bpb(self) -> f64 {
        match self {
            Self::Original => 1.0164,
            Self::Sigma => 1.0747,
            Self::SigmaGrad => 1.0523,
            Self::SigmaAll => 1.0251,
            Self::SigmaAllGrad => 1.0630,
            Self::None => 0.9906,
        }
    }
}

impl fmt::Display for PositioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PositioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown positioning mode {s:?}")))
    }
}

/// Router outputs for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingState<F> {
    pub w: Vec<F>,
    pub mask: Vec<bool>,
    pub sigma: Vec<F>,
    /// Picked positions, strictly increasing.
    pub picked: Vec<usize>,
    pub middle_positions: Vec<F>,
    pub k: usize,
}

impl<F: Scalar> RoutingState<F> {
    /// Routes one sequence with a top-k mask.
    pub fn top_k(w: Vec<F>, k: usize, valid: &[bool], mode: PositioningMode) -> Result<Self> {
        let (mask, picked) = topk_mask(&w, k, valid)?;
        Ok(Self::from_mask(w, mask, picked, k, mode))
    }

    /// Routes one sequence by comparing each weight to a fixed threshold.
    pub fn threshold(w: Vec<F>, threshold: F, valid: &[bool], mode: PositioningMode) -> Self {
        let mask: Vec<bool> = inference_threshold_route(&w, threshold)
            .into_iter()
            .zip(valid)
            .map(|(m, &v)| m && v)
            .collect();
        let picked: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let k = picked.len();
        Self::from_mask(w, mask, picked, k, mode)
    }

    fn from_mask(w: Vec<F>, mask: Vec<bool>, picked: Vec<usize>, k: usize, mode: PositioningMode) -> Self {
        let sigma: Vec<F> = w.iter().map(|&v| sigmoid(v)).collect();
        let middle_positions = middle_positions(&sigma, &picked, mode);
        Self {
            w,
            mask,
            sigma,
            picked,
            middle_positions,
            k,
        }
    }

    pub fn picked_fraction(&self, valid_len: usize) -> f64 {
        self.picked.len() as f64 / valid_len.max(1) as f64
    }
}

/// Scalar weight per row of `x`: `x · weight + bias`, with `weight` of
/// shape `(dim, 1)` and `bias` of shape `(1, 1)`.
pub fn router_weights<F: Scalar>(x: &Array2<F>, weight: &Array2<F>, bias: &Array2<F>) -> Result<Vec<F>> {
    if weight.dim() != (x.ncols(), 1) || bias.dim() != (1, 1) {
        return Err(shape(format!(
            "router weight {:?} / bias {:?} for input dim {}",
            weight.dim(),
            bias.dim(),
            x.ncols()
        )));
    }
    let b = bias[[0, 0]];
    Ok(x.dot(weight).index_axis(Axis(1), 0).iter().map(|&v| v + b).collect())
}

/// Picks the `min(k, #valid)` valid positions with the largest weight.
/// Ties go to the earlier position; `picked` comes back in ascending order.
pub fn topk_mask<F: Scalar>(w: &[F], k: usize, valid: &[bool]) -> Result<(Vec<bool>, Vec<usize>)> {
    if k == 0 {
        return Err(invalid("k must be >= 1"));
    }
    if valid.len() != w.len() {
        return Err(shape(format!("{} valid flags for {} weights", valid.len(), w.len())));
    }
    let mut order: Vec<usize> = (0..w.len()).filter(|&i| valid[i]).collect();
    order.sort_by(|&a, &b| {
        w[b].partial_cmp(&w[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    let mut mask = vec![false; w.len()];
    for &i in &order {
        mask[i] = true;
    }
    Ok((mask, order))
}

/// Positions of the picked tokens as seen by the middle stack.
pub fn middle_positions<F: Scalar>(sigma: &[F], picked: &[usize], mode: PositioningMode) -> Vec<F> {
    match mode {
        PositioningMode::Original | PositioningMode::None => {
            picked.iter().map(|&i| F::from_usize(i).unwrap()).collect()
        }
        PositioningMode::Sigma | PositioningMode::SigmaGrad => {
            let mut acc = F::zero();
            picked
                .iter()
                .map(|&i| {
                    acc += sigma[i];
                    acc
                })
                .collect()
        }
        PositioningMode::SigmaAll | PositioningMode::SigmaAllGrad => {
            let mut cum = Vec::with_capacity(sigma.len());
            let mut acc = F::zero();
            for &s in sigma {
                acc += s;
                cum.push(acc);
            }
            picked.iter().map(|&i| cum[i]).collect()
        }
    }
}

/// Pulls a gradient on the middle positions back to σ. Zero in every mode
/// that does not keep the gradient.
pub fn middle_positions_backward<F: Scalar>(
    d_positions: &[F],
    picked: &[usize],
    seq_len: usize,
    mode: PositioningMode,
) -> Vec<F> {
    let mut d_sigma = vec![F::zero(); seq_len];
    if !mode.keeps_gradient() {
        return d_sigma;
    }
    // suffix sums: d_positions[j] touches every σ counted in position j
    let mut suffix = F::zero();
    if mode.sums_all_tokens() {
        let mut j = picked.len();
        for t in (0..seq_len).rev() {
            while j > 0 && picked[j - 1] >= t {
                j -= 1;
                suffix += d_positions[j];
            }
            d_sigma[t] = suffix;
        }
    } else {
        for (j, &i) in picked.iter().enumerate().rev() {
            suffix += d_positions[j];
            d_sigma[i] = suffix;
        }
    }
    d_sigma
}

/// Rows of `x` at the picked positions, in order.
pub fn gather_compressed<F: Scalar>(x: &Array2<F>, picked: &[usize]) -> Result<Array2<F>> {
    if let Some(&bad) = picked.iter().find(|&&i| i >= x.nrows()) {
        return Err(invalid(format!("picked index {bad} out of range for {} rows", x.nrows())));
    }
    Ok(x.select(Axis(0), picked))
}

/// `y_i = x_i + σ_i · middle_out[rank(i)]` for picked `i`, `y_i = x_i` otherwise.
pub fn gated_scatter_add<F: Scalar>(
    x: &Array2<F>,
    middle_out: &Array2<F>,
    picked: &[usize],
    sigma: &[F],
) -> Result<Array2<F>> {
    if middle_out.nrows() != picked.len() || middle_out.ncols() != x.ncols() {
        return Err(shape(format!(
            "middle output {:?} for {} picked rows of width {}",
            middle_out.dim(),
            picked.len(),
            x.ncols()
        )));
    }
    if sigma.len() != x.nrows() {
        return Err(shape(format!("{} gates for {} rows", sigma.len(), x.nrows())));
    }
    let mut y = x.clone();
    for (r, &i) in picked.iter().enumerate() {
        if i >= x.nrows() {
            return Err(invalid(format!("picked index {i} out of range")));
        }
        let s = sigma[i];
        let mut row = y.row_mut(i);
        for (v, &m) in row.iter_mut().zip(middle_out.row(r)) {
            *v += s * m;
        }
    }
    Ok(y)
}

/// Causal routing for generation: each token is picked iff its own weight
/// reaches the calibrated threshold.
pub fn inference_threshold_route<F: Scalar>(w: &[F], threshold: F) -> Vec<bool> {
    w.iter().map(|&v| v >= threshold).collect()
}
