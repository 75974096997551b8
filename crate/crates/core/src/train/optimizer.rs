use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::model::{LanguageModel, NamedTensor};
use crate::scalar::Scalar;

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup, then cosine decay to 10% of the peak.
    CosineWithWarmup,
}

pub fn learning_rate(schedule: LrSchedule, peak: f64, step: usize, warmup: usize, total: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => peak,
        LrSchedule::CosineWithWarmup => {
            if step < warmup {
                return peak * (step + 1) as f64 / warmup as f64;
            }
            let span = total.saturating_sub(warmup).max(1);
            let progress = ((step - warmup) as f64 / span as f64).min(1.0);
            let min = 0.1 * peak;
            min + (peak - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only
/// (both dimensions > 1); gains, router and biases are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new<M: LanguageModel<F>>(model: &M, weight_decay: f64) -> Self {
        let zeros: Vec<Array2<F>> = model
            .tensors()
            .iter()
            .map(|(_, t)| Array2::zeros(t.raw_dim()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update<M: LanguageModel<F>>(&mut self, model: &mut M, grads: &M, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::lit(1.0 - self.beta1.powi(t));
        let bc2 = F::lit(1.0 - self.beta2.powi(t));
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let (one, eps, lr_f) = (F::one(), F::lit(self.eps), F::lit(lr));
        let decay = F::lit(lr * self.weight_decay);
        let gs = grads.tensors();
        for (i, (_, p)) in model.tensors_mut().into_iter().enumerate() {
            let g = gs[i].1;
            let decays = p.nrows() > 1 && p.ncols() > 1;
            Zip::from(p)
                .and(g)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    if decays {
                        *p -= decay * *p;
                    }
                    *p -= lr_f * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Moments as named tensors (`m.<name>`, `v.<name>`) for checkpoints.
    pub fn state<M: LanguageModel<F>>(&self, model: &M) -> Vec<NamedTensor> {
        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        let conv = |a: &Array2<F>| a.mapv(|x| x.as_f64() as f32);
        let mut out = Vec::with_capacity(2 * names.len());
        for (n, m) in names.iter().zip(&self.m) {
            out.push(NamedTensor::from_array(format!("m.{n}"), &conv(m)));
        }
        for (n, v) in names.iter().zip(&self.v) {
            out.push(NamedTensor::from_array(format!("v.{n}"), &conv(v)));
        }
        out
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<F: Scalar, M: LanguageModel<F>>(grads: &M) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<F: Scalar, M: LanguageModel<F>>(grads: &mut M, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = F::lit(max_norm / norm);
        for (_, t) in grads.tensors_mut() {
            t.mapv_inplace(|v| v * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SynergyModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> SynergyModel<f32> {
        SynergyModel::new(ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise() {
        let mut m = model();
        let before = m.clone();
        let mut grads = m.zeros_like();
        for (_, t) in grads.tensors_mut() {
            t.fill(0.7);
        }
        let mut opt = AdamW::new(&m, 0.1);
        opt.update(&mut m, &grads, 0.0);
        assert_eq!(m, before);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn clipping_bounds_norm() {
        let m = model();
        let mut grads = m.zeros_like();
        for (_, t) in grads.tensors_mut() {
            t.fill(0.3);
        }
        let before = clip_grad_norm(&mut grads, 1.0);
        assert!(before > 1.0);
        assert!(grad_norm(&grads) <= 1.0 + 1e-4);
        let mut small = m.zeros_like();
        assert_eq!(clip_grad_norm(&mut small, 1.0), 0.0);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::CosineWithWarmup;
        assert!((learning_rate(s, 1.0, 0, 10, 100) - 0.1).abs() < 1e-12);
        assert!((learning_rate(s, 1.0, 9, 10, 100) - 1.0).abs() < 1e-12);
        assert!((learning_rate(s, 1.0, 10, 10, 100) - 1.0).abs() < 1e-12);
        assert!((learning_rate(s, 1.0, 100, 10, 100) - 0.1).abs() < 1e-12);
        assert_eq!(learning_rate(LrSchedule::Constant, 0.5, 77, 10, 100), 0.5);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut m = model();
        let before = m.final_norm.clone();
        let mut grads = m.zeros_like();
        grads.final_norm.fill(1.0);
        let mut opt = AdamW::new(&m, 0.0);
        opt.update(&mut m, &grads, 0.01);
        for (a, b) in m.final_norm.iter().zip(before.iter()) {
            assert!((b - a - 0.01).abs() < 1e-5);
        }
    }
}
