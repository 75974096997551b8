//! Finite-difference checks of the full model in every positioning mode.

mod common;

use common::{random_batch, random_model, tiny_config};
use synergy_core::model::{cross_entropy, LanguageModel, Routing};
use synergy_core::router::PositioningMode;

/// Relative error between analytic and central-difference gradients for
/// a sample of parameters; returns (fraction passing, worst case name).
fn check_mode(mode: PositioningMode, seed: u64) -> (f64, usize, String) {
    let cfg = tiny_config(mode);
    let model = random_model::<f64>(cfg.clone(), seed, 0.3);
    let batch = random_batch(&cfg, 2, seed + 100, false);
    let (_, grads, routing) = model.loss_and_grad(&batch).unwrap();
    // gradient-cut modes treat the middle positions as constants
    let frozen: Vec<Vec<f64>> = routing.iter().map(|r| r.middle_positions.clone()).collect();
    let loss_at = |m: &synergy_core::model::SynergyModel<f64>| {
        let out = if mode.keeps_gradient() || matches!(mode, PositioningMode::Original | PositioningMode::None) {
            m.forward(&batch.ids, Some(&batch.valid), Routing::TopK).unwrap()
        } else {
            m.forward_frozen_positions(&batch.ids, Some(&batch.valid), &frozen).unwrap()
        };
        // the perturbation must not flip the routing decision
        for (a, b) in out.routing.iter().zip(&routing) {
            assert_eq!(a.picked, b.picked, "mask flipped under perturbation");
        }
        cross_entropy(&out.logits, &batch.ids, &batch.loss_mask).unwrap().0.mean_nats
    };
    let h = 1e-3;
    let mut pass = 0;
    let mut total = 0;
    let mut worst = (0.0, String::new());
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let grad_tensors = grads.tensors();
    for (ti, name) in names.iter().enumerate() {
        let len = grad_tensors[ti].1.len();
        let ncols = grad_tensors[ti].1.ncols();
        let picks: Vec<usize> = if name.starts_with("router") {
            (0..len).collect()
        } else {
            (0..len).step_by((len / 6).max(1)).collect()
        };
        for flat in picks {
            let idx = (flat / ncols, flat % ncols);
            let bump = |delta: f64| {
                let mut m = model.clone();
                m.tensors_mut()[ti].1[idx] += delta;
                loss_at(&m)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let analytic = grad_tensors[ti].1[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            total += 1;
            if rel < 1e-3 {
                pass += 1;
            } else if rel > worst.0 {
                worst = (rel, format!("{name}{idx:?}: {analytic} vs {numeric}"));
            }
        }
    }
    (pass as f64 / total as f64, total, worst.1)
}

#[test]
fn full_model_gradients_all_modes() {
    for mode in PositioningMode::ALL {
        let (frac, n, worst) = check_mode(mode, 7);
        println!("{mode}: {:.2}% of {n} ok; worst {worst}", frac * 100.0);
        assert!(frac >= 0.99, "{mode}: {frac} ({worst})");
    }
}
