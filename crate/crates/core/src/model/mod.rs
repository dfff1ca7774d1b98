//! Transformer-encoder sequence classifier.
//!
//! Token embedding plus fixed sinusoidal positions, a stack of post-norm
//! encoder layers (masked multi-head self-attention and a ReLU feed-forward
//! block), masked mean pooling and a two-layer classification head emitting
//! pass/fail logits. Gradients are derived by hand; Adam drives training.

mod checkpoint;
mod gemm;
mod network;
mod train;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{forward, loss_and_grad, ForwardOutput};
pub use train::{predict, predict_logits, train, Prediction, TrainConfig, TrainOutput};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence {index} has length {got}, model expects {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("{labels} labels for a batch of {batch}")]
    LabelMismatch { batch: usize, labels: usize },
    #[error("training data is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    InvalidTrainConfig(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub num_classes: usize,
}

impl ModelConfig {
    pub const DEFAULT_SEQ_LEN: usize = 2048;
    pub const DEFAULT_EMBED_DIM: usize = 128;
    pub const DEFAULT_LAYERS: usize = 2;
    pub const DEFAULT_HEADS: usize = 2;

    /// Experimental defaults: L = 2048, d = 128, 2 layers, 2 heads.
    pub fn new(vocab_size: usize) -> Self {
        let d = Self::DEFAULT_EMBED_DIM;
        ModelConfig {
            vocab_size,
            seq_len: Self::DEFAULT_SEQ_LEN,
            embed_dim: d,
            num_layers: Self::DEFAULT_LAYERS,
            num_heads: Self::DEFAULT_HEADS,
            ffn_dim: 4 * d,
            mlp_hidden: 64,
            dropout: 0.1,
            num_classes: 2,
        }
    }

    /// Sets `embed_dim` and resizes `ffn_dim` to 4·d.
    pub fn with_embed_dim(mut self, d: usize) -> Self {
        self.embed_dim = d;
        self.ffn_dim = 4 * d;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.num_classes != 2 {
            return Err(ModelError::InvalidConfig("num_classes is fixed at 2".into()));
        }
        Ok(())
    }
}

/// Weights of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

macro_rules! layer_tensors {
    ($self:ident, $as_slice:ident) => {
        vec![
            ("wq", $self.wq.$as_slice().unwrap()),
            ("bq", $self.bq.$as_slice().unwrap()),
            ("wk", $self.wk.$as_slice().unwrap()),
            ("bk", $self.bk.$as_slice().unwrap()),
            ("wv", $self.wv.$as_slice().unwrap()),
            ("bv", $self.bv.$as_slice().unwrap()),
            ("wo", $self.wo.$as_slice().unwrap()),
            ("bo", $self.bo.$as_slice().unwrap()),
            ("ln1_gain", $self.ln1_gain.$as_slice().unwrap()),
            ("ln1_bias", $self.ln1_bias.$as_slice().unwrap()),
            ("w1", $self.w1.$as_slice().unwrap()),
            ("b1", $self.b1.$as_slice().unwrap()),
            ("w2", $self.w2.$as_slice().unwrap()),
            ("b2", $self.b2.$as_slice().unwrap()),
            ("ln2_gain", $self.ln2_gain.$as_slice().unwrap()),
            ("ln2_bias", $self.ln2_bias.$as_slice().unwrap()),
        ]
    };
}

impl LayerParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.embed_dim, cfg.ffn_dim);
        LayerParams {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
        }
    }
}

/// All trainable weights, plus the configuration that shapes them.
///
/// The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `vocab_size × d`.
    pub embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
    /// `d × mlp_hidden`.
    pub head_w1: Array2<f64>,
    pub head_b1: Array1<f64>,
    /// `mlp_hidden × 2`.
    pub head_w2: Array2<f64>,
    pub head_b2: Array1<f64>,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        ModelParams {
            config: *config,
            embedding: Array2::zeros((config.vocab_size, config.embed_dim)),
            layers: (0..config.num_layers).map(|_| LayerParams::zeros(config)).collect(),
            head_w1: Array2::zeros((config.embed_dim, config.mlp_hidden)),
            head_b1: Array1::zeros(config.mlp_hidden),
            head_w2: Array2::zeros((config.mlp_hidden, config.num_classes)),
            head_b2: Array1::zeros(config.num_classes),
        }
    }

    /// Every tensor as a flat slice, in a fixed order, with a readable name.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = vec![("embedding".to_string(), self.embedding.as_slice().unwrap())];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(layer_tensors!(l, as_slice).into_iter().map(|(n, s)| (format!("layer{i}.{n}"), s)));
        }
        out.push(("head.w1".into(), self.head_w1.as_slice().unwrap()));
        out.push(("head.b1".into(), self.head_b1.as_slice().unwrap()));
        out.push(("head.w2".into(), self.head_w2.as_slice().unwrap()));
        out.push(("head.b2".into(), self.head_b2.as_slice().unwrap()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = vec![("embedding".to_string(), self.embedding.as_slice_mut().unwrap())];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(layer_tensors!(l, as_slice_mut).into_iter().map(|(n, s)| (format!("layer{i}.{n}"), s)));
        }
        out.push(("head.w1".into(), self.head_w1.as_slice_mut().unwrap()));
        out.push(("head.b1".into(), self.head_b1.as_slice_mut().unwrap()));
        out.push(("head.w2".into(), self.head_w2.as_slice_mut().unwrap()));
        out.push(("head.b2".into(), self.head_b2.as_slice_mut().unwrap()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
}

/// Glorot-uniform bound `√(6/(fan_in+fan_out))` of a weight matrix.
pub fn init_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Seeded initialization.
///
/// Weight matrices are uniform in `±√(6/(fan_in+fan_out))`, embeddings are
/// normal with σ = d^(-1/2), biases start at zero and layer-norm gains at one.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f, m) = (config.embed_dim, config.ffn_dim, config.mlp_hidden);
    let mut p = ModelParams::zeros(config);
    let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("positive sigma");
    p.embedding = Array2::from_shape_simple_fn((config.vocab_size, d), || normal.sample(&mut rng));
    for l in &mut p.layers {
        l.wq = xavier(&mut rng, d, d);
        l.wk = xavier(&mut rng, d, d);
        l.wv = xavier(&mut rng, d, d);
        l.wo = xavier(&mut rng, d, d);
        l.w1 = xavier(&mut rng, d, f);
        l.w2 = xavier(&mut rng, f, d);
        l.ln1_gain.fill(1.0);
        l.ln2_gain.fill(1.0);
    }
    p.head_w1 = xavier(&mut rng, d, m);
    p.head_w2 = xavier(&mut rng, m, config.num_classes);
    Ok(p)
}
