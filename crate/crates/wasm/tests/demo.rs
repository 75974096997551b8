use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use synergy_core::model::{Checkpoint, DenseModel, ModelConfig, SynergyModel};
use synergy_wasm::{flops_json, positioning_modes, positions_json, Demo};

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn flops_matches_the_paper_preset() {
    let v = parse(&flops_json("paper", 1024, 224, 0).unwrap());
    assert_eq!(v["baseline_tokens"], 241);
    let ratio = v["ratio"].as_f64().unwrap();
    assert!((1.3..2.0).contains(&ratio), "{ratio}");
    let s = v["synergy"]["total"].as_f64().unwrap();
    let b = v["baseline"]["total"].as_f64().unwrap();
    assert!((s / b - ratio).abs() < 1e-12);
}

#[test]
fn flops_rejects_bad_inputs() {
    assert!(flops_json("paper", 1024, 0, 0).is_err());
    assert!(flops_json("paper", 100, 200, 0).is_err());
    assert!(flops_json("huge", 1024, 224, 0).is_err());
}

#[test]
fn positions_for_every_mode() {
    let w = [0.3, -1.2, 2.0, 0.1, -0.4, 1.7, 0.9, -2.2];
    let modes = positioning_modes();
    assert_eq!(modes.len(), 6);
    for m in &modes {
        let v = parse(&positions_json(&w, 3, m).unwrap());
        assert_eq!(v["picked"], serde_json::json!([2, 5, 6]));
        assert_eq!(v["positions"].as_array().unwrap().len(), 3);
        assert_eq!(v["mask"].as_array().unwrap().iter().filter(|b| b.as_bool().unwrap()).count(), 3);
    }
    let orig = parse(&positions_json(&w, 3, "original").unwrap());
    assert_eq!(orig["positions"], serde_json::json!([2.0, 5.0, 6.0]));
    assert!(positions_json(&w, 9, "none").is_err());
    assert!(positions_json(&w, 2, "bogus").is_err());
    assert!(positions_json(&[1.0, f64::NAN], 1, "none").is_err());
}

#[test]
fn random_demo_renders_one_cell_per_byte() {
    let demo = Demo::random("tiny", 7).unwrap();
    assert!(!demo.trained());
    let text = "a < b & c";
    let html = demo.render(text, "topk").unwrap();
    assert!(html.starts_with("<div>") && html.ends_with("</div>"));
    assert_eq!(html.matches("<span class=\"cell").count(), text.len());
    assert_eq!(html.matches("cell picked").count(), demo.k().min(text.len()));
    let v = parse(&demo.route_json(text, "threshold").unwrap());
    assert_eq!(v["w"].as_array().unwrap().len(), text.len());
    assert!(demo.render(text, "sideways").is_err());
    assert!(demo.render("", "topk").is_err());
    assert!(Demo::random("paper", 0).is_err());
}

#[test]
fn random_demo_is_seeded() {
    let a = Demo::random("tiny", 3).unwrap().route_json("hello world", "topk").unwrap();
    let b = Demo::random("tiny", 3).unwrap().route_json("hello world", "topk").unwrap();
    let c = Demo::random("tiny", 4).unwrap().route_json("hello world", "topk").unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn loads_checkpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = SynergyModel::<f32>::new(ModelConfig::tiny(), &mut rng).unwrap();
    let mut ck = Checkpoint::from_model(&model);
    ck.router_threshold = 0.25;
    let demo = Demo::from_checkpoint(&ck.to_bytes().unwrap()).unwrap();
    assert!(demo.trained());
    assert_eq!(demo.context_length(), 24);
    // zero router: every weight is 0, below the threshold
    let v = parse(&demo.route_json("bytes", "threshold").unwrap());
    assert_eq!(v["picked_fraction"], 0.0);

    let dense = DenseModel::<f32>::new(ModelConfig::tiny(), &mut rng).unwrap();
    let bytes = Checkpoint::from_model(&dense).to_bytes().unwrap();
    assert!(Demo::from_checkpoint(&bytes).is_err());
    assert!(Demo::from_checkpoint(b"not a checkpoint").is_err());
}
