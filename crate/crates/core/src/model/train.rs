use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{forward, loss_and_grad_with};
use super::{ModelError, ModelParams};
use crate::tokenizer::TokenSequence;
use crate::trace::Verdict;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Loss weights for (pass, fail).
    pub class_weights: Option<[f64; 2]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 2500, batch_size: 8, learning_rate: 1e-4, seed: 0, class_weights: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(ModelError::InvalidTrainConfig("steps and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidTrainConfig(format!("learning rate {}", self.learning_rate)));
        }
        if let Some(w) = self.class_weights {
            if !w.iter().all(|x| *x > 0.0 && x.is_finite()) {
                return Err(ModelError::InvalidTrainConfig("class weights must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ModelParams,
    /// Mini-batch loss at every step, before that step's update.
    pub losses: Vec<f64>,
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    fn new(like: &ModelParams) -> Self {
        Adam { m: ModelParams::zeros(&like.config), v: ModelParams::zeros(&like.config), t: 0 }
    }

    fn step(&mut self, params: &mut ModelParams, grad: &ModelParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let grads = grad.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Adam training on mini-batches drawn uniformly with replacement.
///
/// Batch indices and dropout masks come from one generator seeded with
/// `cfg.seed`, so equal inputs give bit-identical runs.
pub fn train(
    params: ModelParams,
    data: &[(TokenSequence, usize)],
    cfg: &TrainConfig,
) -> Result<TrainOutput, ModelError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut params = params;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&params);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.steps {
        batch.clear();
        labels.clear();
        for _ in 0..cfg.batch_size {
            let (seq, y) = &data[rng.gen_range(0..data.len())];
            batch.push(seq.clone());
            labels.push(*y);
        }
        let (loss, grad) = loss_and_grad_with(&params, &batch, &labels, cfg.class_weights, Some(&mut rng))?;
        losses.push(loss);
        adam.step(&mut params, &grad, cfg.learning_rate);
    }
    Ok(TrainOutput { params, losses })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub verdict: Verdict,
    /// Softmax probabilities of (pass, fail).
    pub probs: [f64; 2],
}

impl Prediction {
    /// Argmax of the logits; an exact tie resolves to `Fail`.
    pub fn from_logits(pass: f64, fail: f64) -> Self {
        let max = pass.max(fail);
        let (ep, ef) = ((pass - max).exp(), (fail - max).exp());
        let sum = ep + ef;
        let verdict = if pass > fail { Verdict::Pass } else { Verdict::Fail };
        Prediction { verdict, probs: [ep / sum, ef / sum] }
    }

    pub fn p_fail(&self) -> f64 {
        self.probs[1]
    }
}

pub fn predict(params: &ModelParams, seq: &TokenSequence) -> Result<Prediction, ModelError> {
    Ok(predict_logits(params, std::slice::from_ref(seq))?.remove(0))
}

/// Batched [`predict`].
pub fn predict_logits(params: &ModelParams, seqs: &[TokenSequence]) -> Result<Vec<Prediction>, ModelError> {
    let out = forward(params, seqs)?;
    Ok(out.logits.rows().into_iter().map(|r| Prediction::from_logits(r[0], r[1])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::tokenizer::{EOT, PAD, RESERVED};

    fn tiny() -> ModelConfig {
        ModelConfig {
            seq_len: 8,
            num_layers: 1,
            num_heads: 1,
            mlp_hidden: 8,
            ..ModelConfig::new(RESERVED + 3).with_embed_dim(8)
        }
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        let mut v = ids.to_vec();
        let true_len = v.len();
        v.resize(8, PAD);
        TokenSequence { ids: v, true_len }
    }

    #[test]
    fn tie_resolves_to_fail() {
        let p = Prediction::from_logits(0.0, 0.0);
        assert_eq!(p.verdict, Verdict::Fail);
        assert_eq!(p.probs, [0.5, 0.5]);
    }

    #[test]
    fn confident_pass() {
        let p = Prediction::from_logits(3.0, -3.0);
        assert_eq!(p.verdict, Verdict::Pass);
        let want = 1.0 / (1.0 + (-6.0f64).exp());
        assert!((p.probs[0] - want).abs() < 1e-15);
        assert!((p.probs[0] + p.probs[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let p = init_model(&tiny(), 1).unwrap();
        let data = vec![(seq(&[13, EOT]), 0)];
        let cfg = TrainConfig { steps: 1, learning_rate: 0.0, ..TrainConfig::default() };
        let out = train(p.clone(), &data, &cfg).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.losses.len(), 1);
    }

    #[test]
    fn empty_dataset_and_bad_config() {
        let p = init_model(&tiny(), 1).unwrap();
        assert_eq!(train(p.clone(), &[], &TrainConfig::default()).unwrap_err(), ModelError::EmptyDataset);
        let cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(matches!(train(p, &[(seq(&[EOT]), 0)], &cfg), Err(ModelError::InvalidTrainConfig(_))));
    }

    #[test]
    fn same_seed_same_losses() {
        let data = vec![(seq(&[13, 4, EOT]), 0), (seq(&[14, 5, 6, EOT]), 1), (seq(&[15, EOT]), 1)];
        let cfg = TrainConfig { steps: 20, batch_size: 4, learning_rate: 1e-3, seed: 9, class_weights: None };
        let a = train(init_model(&tiny(), 2).unwrap(), &data, &cfg).unwrap();
        let b = train(init_model(&tiny(), 2).unwrap(), &data, &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params, b.params);
        assert!(a.params.is_finite());
    }

    /// Token 13 appears only in failing sequences, token 14 only in passing.
    #[test]
    fn learns_single_token_rule() {
        let mut data = Vec::new();
        for i in 0..40u32 {
            let noise = [3 + i % 10, 3 + (i * 7) % 10];
            let (marker, y) = if i % 2 == 0 { (13, 1) } else { (14, 0) };
            data.push((seq(&[noise[0], marker, noise[1], EOT]), y));
        }
        let cfg = TrainConfig { steps: 400, batch_size: 8, learning_rate: 1e-3, seed: 3, class_weights: None };
        let out = train(init_model(&tiny(), 5).unwrap(), &data, &cfg).unwrap();
        let tail = &out.losses[out.losses.len() - 100..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(mean < 0.1, "final-100-step mean loss {mean}");
        let correct = data
            .iter()
            .filter(|(s, y)| predict(&out.params, s).unwrap().verdict == Verdict::from_class(*y))
            .count();
        assert_eq!(correct, data.len());
    }
}
