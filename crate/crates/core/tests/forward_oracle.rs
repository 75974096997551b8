//! Straight-line re-implementation of the routed forward pass on nested
//! `Vec`s, sharing no compute code with the library.

mod common;

use std::collections::HashMap;

use ndarray::Array2;
use synergy_core::model::{LanguageModel, ModelConfig, Routing};
use synergy_core::router::PositioningMode;

type Mat = Vec<Vec<f64>>;

struct Params(HashMap<String, Mat>);

impl Params {
    fn get(&self, name: &str) -> &Mat {
        self.0.get(name).unwrap_or_else(|| panic!("missing {name}"))
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().enumerate().map(|(k, &v)| v * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn rmsnorm(x: &Mat, g: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let s = 1.0 / (ms + 1e-5).sqrt();
            row.iter().zip(g).map(|(v, g)| v * s * g).collect()
        })
        .collect()
}

fn rotate(v: &mut [f64], pos: f64, head_dim: usize) {
    for h in 0..v.len() / head_dim {
        for d in 0..head_dim / 2 {
            let theta = pos * 10000f64.powf(-2.0 * d as f64 / head_dim as f64);
            let (c, s) = (theta.cos(), theta.sin());
            let i = h * head_dim + 2 * d;
            let (a, b) = (v[i], v[i + 1]);
            v[i] = a * c - b * s;
            v[i + 1] = a * s + b * c;
        }
    }
}

fn attention(p: &Params, pre: &str, x: &Mat, pos: &[f64], heads: usize, window: Option<usize>, rotary: bool) -> Mat {
    let mut q = matmul(x, p.get(&format!("{pre}.wq")));
    let mut k = matmul(x, p.get(&format!("{pre}.wk")));
    let v = matmul(x, p.get(&format!("{pre}.wv")));
    let dim = x[0].len();
    let hd = dim / heads;
    if rotary {
        for t in 0..x.len() {
            rotate(&mut q[t], pos[t], hd);
            rotate(&mut k[t], pos[t], hd);
        }
    }
    let mut ctx = vec![vec![0.0; dim]; x.len()];
    for h in 0..heads {
        for i in 0..x.len() {
            let lo = window.map_or(0, |w| (i + 1).saturating_sub(w));
            let scores: Vec<f64> = (lo..=i)
                .map(|j| (0..hd).map(|c| q[i][h * hd + c] * k[j][h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (n, j) in (lo..=i).enumerate() {
                for c in 0..hd {
                    ctx[i][h * hd + c] += e[n] / z * v[j][h * hd + c];
                }
            }
        }
    }
    matmul(&ctx, p.get(&format!("{pre}.wo")))
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn layer(p: &Params, pre: &str, x: &Mat, pos: &[f64], heads: usize, window: Option<usize>, rotary: bool) -> Mat {
    let h = rmsnorm(x, &p.get(&format!("{pre}.attn_norm"))[0]);
    let x = add(x, &attention(p, pre, &h, pos, heads, window, rotary));
    let h = rmsnorm(&x, &p.get(&format!("{pre}.mlp_norm"))[0]);
    let g = matmul(&h, p.get(&format!("{pre}.w_gate")));
    let u = matmul(&h, p.get(&format!("{pre}.w_up")));
    let act: Mat = g
        .iter()
        .zip(&u)
        .map(|(gr, ur)| gr.iter().zip(ur).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect())
        .collect();
    add(&x, &matmul(&act, p.get(&format!("{pre}.w_down"))))
}

fn oracle_row(p: &Params, cfg: &ModelConfig, ids: &[u32]) -> Mat {
    let heads = cfg.block.n_heads;
    let win = cfg.block.window;
    let t = ids.len();
    let pos: Vec<f64> = (0..t).map(|i| i as f64).collect();
    let mut x: Mat = ids.iter().map(|&i| p.get("embed")[i as usize].clone()).collect();
    for l in 0..cfg.enc_layers {
        x = layer(p, &format!("enc.{l}"), &x, &pos, heads, win, true);
    }
    let r = p.get("router.weight");
    let b = p.get("router.bias")[0][0];
    let w: Vec<f64> = x.iter().map(|row| row.iter().zip(r).map(|(a, c)| a * c[0]).sum::<f64>() + b).collect();
    let sigma: Vec<f64> = w.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    // k largest, earliest first on ties
    let mut picked: Vec<usize> = Vec::new();
    for _ in 0..cfg.k.min(t) {
        let best = (0..t)
            .filter(|i| !picked.contains(i))
            .fold(None, |acc: Option<usize>, i| match acc {
                Some(a) if w[a] >= w[i] => Some(a),
                _ => Some(i),
            })
            .unwrap();
        picked.push(best);
    }
    picked.sort();
    let mode = cfg.positioning;
    let mid_pos: Vec<f64> = picked
        .iter()
        .enumerate()
        .map(|(n, &i)| match mode {
            PositioningMode::Original | PositioningMode::None => i as f64,
            PositioningMode::Sigma | PositioningMode::SigmaGrad => picked[..=n].iter().map(|&j| sigma[j]).sum(),
            PositioningMode::SigmaAll | PositioningMode::SigmaAllGrad => sigma[..=i].iter().sum(),
        })
        .collect();
    let mut xm: Mat = picked.iter().map(|&i| x[i].clone()).collect();
    for l in 0..cfg.mid_layers {
        xm = layer(p, &format!("mid.{l}"), &xm, &mid_pos, heads, None, mode != PositioningMode::None);
    }
    let mo = matmul(&rmsnorm(&xm, &p.get("mid_norm")[0]), p.get("mid_out"));
    for (n, &i) in picked.iter().enumerate() {
        for c in 0..x[i].len() {
            x[i][c] += sigma[i] * mo[n][c];
        }
    }
    for l in 0..cfg.dec_layers {
        x = layer(p, &format!("dec.{l}"), &x, &pos, heads, win, true);
    }
    matmul(&rmsnorm(&x, &p.get("final_norm")[0]), p.get("head"))
}

fn oracle_config(mode: PositioningMode) -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.context_length = 6;
    cfg.enc_layers = 1;
    cfg.mid_layers = 1;
    cfg.dec_layers = 1;
    cfg.block.model_dim = 8;
    cfg.block.n_heads = 2;
    cfg.block.head_dim = 4;
    cfg.block.mlp_dim = 16;
    cfg.block.window = Some(3);
    cfg.k = 3;
    cfg.positioning = mode;
    cfg
}

#[test]
fn forward_matches_straight_line_oracle() {
    for mode in PositioningMode::ALL {
        let cfg = oracle_config(mode);
        for seed in 0..5 {
            let model = common::random_model::<f64>(cfg.clone(), 100 + seed, 0.7);
            let params = Params(
                model
                    .tensors()
                    .into_iter()
                    .map(|(n, t)| (n, t.rows().into_iter().map(|r| r.to_vec()).collect()))
                    .collect(),
            );
            let ids = common::random_ids(&cfg, 2, seed);
            let out = model.forward(&ids, None, Routing::TopK).unwrap();
            for row in 0..2 {
                let row_ids: Vec<u32> = ids.row(row).to_vec();
                let expected = oracle_row(&params, &cfg, &row_ids);
                for t in 0..cfg.context_length {
                    for v in 0..cfg.vocab_size {
                        let got = out.logits[[row * cfg.context_length + t, v]];
                        assert!(
                            (got - expected[t][v]).abs() < 1e-10,
                            "{mode} seed {seed} row {row} t {t} v {v}: {got} vs {}",
                            expected[t][v]
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn logits_layout_is_rows_by_width() {
    let cfg = oracle_config(PositioningMode::None);
    let model = common::random_model::<f64>(cfg.clone(), 1, 0.5);
    let ids = Array2::from_elem((3, 6), 65u32);
    let out = model.forward(&ids, None, Routing::TopK).unwrap();
    assert_eq!(out.logits.dim(), (18, cfg.vocab_size));
    assert_eq!(out.routing.len(), 3);
    // identical rows give identical logits
    for t in 0..6 {
        for v in 0..cfg.vocab_size {
            assert_eq!(out.logits[[t, v]], out.logits[[12 + t, v]]);
        }
    }
}
