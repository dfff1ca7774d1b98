//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use goracle::model::{init_model, loss_and_grad, ModelConfig, ModelParams};
use goracle::tokenizer::{TokenSequence, EOT, PAD, RESERVED};

pub const EPS: f64 = 1e-4;

pub fn seq(ids: &[u32], len: usize) -> TokenSequence {
    let mut v = ids.to_vec();
    let true_len = v.len();
    v.resize(len, PAD);
    TokenSequence { ids: v, true_len }
}

pub fn tiny() -> ModelConfig {
    ModelConfig {
        seq_len: 16,
        num_layers: 1,
        num_heads: 1,
        mlp_hidden: 6,
        ..ModelConfig::new(RESERVED + 5).with_embed_dim(8)
    }
}

fn loss_only(p: &ModelParams, batch: &[TokenSequence], labels: &[usize], w: Option<[f64; 2]>) -> f64 {
    loss_and_grad(p, batch, labels, w).unwrap().0
}

/// Gradients below this norm are roundoff; the key bias, for one, has an
/// identically zero gradient because softmax ignores a per-row shift.
const FLOOR: f64 = 1e-7;

/// Per-tensor relative error ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, FLOOR).
pub fn check_gradients(cfg: &ModelConfig, seed: u64, weights: Option<[f64; 2]>) -> Vec<(String, f64)> {
    let mut params = init_model(cfg, seed).unwrap();
    // Move biases and gains off their initial constants so every path is exercised.
    for (i, (_, t)) in params.tensors_mut().into_iter().enumerate() {
        for (j, x) in t.iter_mut().enumerate() {
            *x += 0.05 * (((i * 31 + j * 17) % 13) as f64 / 13.0 - 0.5);
        }
    }
    let l = cfg.seq_len;
    let batch = vec![
        seq(&[13, 4, 5, 14, 9, 15, EOT], l),
        seq(&[16, 17, 3, 3, 8, 12, 13, 14, 6, EOT], l),
        seq(&[EOT], l),
        seq(&(0..16).map(|i| 3 + (i * 5) % 15).collect::<Vec<_>>(), l),
    ];
    let labels = [1, 0, 1, 0];
    let (_, analytic) = loss_and_grad(&params, &batch, &labels, weights).unwrap();

    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let mut report = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let len = params.tensors()[ti].1.len();
        let mut numeric = vec![0.0; len];
        for (j, num) in numeric.iter_mut().enumerate() {
            let orig = params.tensors()[ti].1[j];
            params.tensors_mut()[ti].1[j] = orig + EPS;
            let up = loss_only(&params, &batch, &labels, weights);
            params.tensors_mut()[ti].1[j] = orig - EPS;
            let down = loss_only(&params, &batch, &labels, weights);
            params.tensors_mut()[ti].1[j] = orig;
            *num = (up - down) / (2.0 * EPS);
        }
        let a = analytic.tensors()[ti].1;
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(FLOOR);
        report.push((name.clone(), rel));
    }
    report
}
