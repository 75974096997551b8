use ndarray::{Array2, Zip};

use crate::error::{shape, Result};
use crate::scalar::{sigmoid, silu, Scalar};

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    x: Array2<F>,
    gate: Array2<F>,
    up: Array2<F>,
    hidden: Array2<F>,
}

/// `W_down(silu(x W_gate) * (x W_up))`. The intermediate width is exactly
/// the width of the weight matrices.
pub fn swiglu_mlp<F: Scalar>(
    x: &Array2<F>,
    w_gate: &Array2<F>,
    w_up: &Array2<F>,
    w_down: &Array2<F>,
) -> Result<(Array2<F>, MlpCache<F>)> {
    if x.ncols() != w_gate.nrows() || w_gate.dim() != w_up.dim() || w_down.nrows() != w_gate.ncols()
    {
        return Err(shape(format!(
            "mlp shapes x {:?}, gate {:?}, up {:?}, down {:?}",
            x.dim(),
            w_gate.dim(),
            w_up.dim(),
            w_down.dim()
        )));
    }
    let gate = x.dot(w_gate);
    let up = x.dot(w_up);
    let mut hidden = gate.clone();
    Zip::from(&mut hidden).and(&up).for_each(|h, &u| *h = silu(*h) * u);
    let out = hidden.dot(w_down);
    Ok((
        out,
        MlpCache {
            x: x.clone(),
            gate,
            up,
            hidden,
        },
    ))
}

impl<F: Scalar> MlpCache<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        w_gate: &Array2<F>,
        w_up: &Array2<F>,
        w_down: &Array2<F>,
        dout: &Array2<F>,
        d_gate: &mut Array2<F>,
        d_up: &mut Array2<F>,
        d_down: &mut Array2<F>,
    ) -> Array2<F> {
        *d_down += &self.hidden.t().dot(dout);
        let dh = dout.dot(&w_down.t());
        let mut dg = Array2::zeros(self.gate.raw_dim());
        let mut du = Array2::zeros(self.up.raw_dim());
        Zip::from(&mut dg)
            .and(&mut du)
            .and(&dh)
            .and(&self.gate)
            .and(&self.up)
            .for_each(|dg, du, &dh, &a, &b| {
                let s = sigmoid(a);
                *du = dh * a * s;
                *dg = dh * b * s * (F::one() + a * (F::one() - s));
            });
        *d_gate += &self.x.t().dot(&dg);
        *d_up += &self.x.t().dot(&du);
        let mut dx = dg.dot(&w_gate.t());
        dx += &du.dot(&w_up.t());
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn zero_input_gives_zero() {
        let x = Array2::<f64>::zeros((3, 4));
        let w = Array2::from_elem((4, 6), 0.3);
        let d = Array2::from_elem((6, 4), -0.2);
        let (y, _) = swiglu_mlp(&x, &w, &w, &d).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_closed_form() {
        let (g, u, d, t) = (0.8f64, -1.5, 2.0, 0.6);
        let (y, _) = swiglu_mlp(&arr2(&[[t]]), &arr2(&[[g]]), &arr2(&[[u]]), &arr2(&[[d]])).unwrap();
        let gt = g * t;
        let expected = d * (gt / (1.0 + (-gt).exp())) * (u * t);
        assert!((y[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let x = Array2::<f32>::zeros((2, 3));
        let w = Array2::zeros((4, 5));
        assert!(swiglu_mlp(&x, &w, &w, &Array2::zeros((5, 4))).is_err());
    }
}
