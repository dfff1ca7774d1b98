//! Self-contained model files.
//!
//! ```text
//! "GORACLE1"  u32 version  u64 payload_len  payload  sha256(all preceding bytes)
//! payload = config  field mask  vocabulary  tensors
//! ```
//!
//! All integers and floats are little-endian; parameters are IEEE-754
//! binary64 in [`ModelParams::tensors`] order.

use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, ModelParams};
use crate::tokenizer::{FieldSet, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GORACLE1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything inference needs: weights, architecture, vocabulary and the
/// field selection the model was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub fields: FieldSet,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let c = &ckpt.params.config;
    let mut payload = Vec::new();
    for v in [c.vocab_size, c.seq_len, c.embed_dim, c.num_layers, c.num_heads, c.ffn_dim, c.mlp_hidden] {
        payload.extend_from_slice(&(v as u64).to_le_bytes());
    }
    payload.extend_from_slice(&c.dropout.to_le_bytes());
    payload.extend_from_slice(&(c.num_classes as u64).to_le_bytes());
    payload.extend_from_slice(&ckpt.fields.bits().to_le_bytes());

    payload.extend_from_slice(&(ckpt.vocab.len() as u64).to_le_bytes());
    for t in ckpt.vocab.tokens() {
        payload.extend_from_slice(&(t.len() as u32).to_le_bytes());
        payload.extend_from_slice(t.as_bytes());
    }

    let tensors = ckpt.params.tensors();
    payload.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (_, data) in tensors {
        payload.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for x in data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }

    let mut out = Vec::with_capacity(payload.len() + 52);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::CorruptCheckpoint(msg.into())
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated payload"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, ModelError> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("size does not fit in memory"))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    const HEADER: usize = 8 + 4 + 8;
    if bytes.len() < HEADER + 32 {
        return Err(corrupt(format!("{} bytes is shorter than any checkpoint", bytes.len())));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let payload_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if Some(bytes.len() as u64) != payload_len.checked_add((HEADER + 32) as u64) {
        return Err(corrupt(format!("length {} does not match declared payload of {payload_len} bytes", bytes.len())));
    }
    let body_end = bytes.len() - 32;
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(corrupt("checksum mismatch"));
    }

    let mut cur = Cursor { buf: &bytes[HEADER..body_end], pos: 0 };
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = cur.usize()?;
    }
    let dropout = cur.f64()?;
    let num_classes = cur.usize()?;
    let config = ModelConfig {
        vocab_size: dims[0],
        seq_len: dims[1],
        embed_dim: dims[2],
        num_layers: dims[3],
        num_heads: dims[4],
        ffn_dim: dims[5],
        mlp_hidden: dims[6],
        dropout,
        num_classes,
    };
    config.validate().map_err(|e| corrupt(e.to_string()))?;
    let fields = FieldSet::from_bits(cur.u16()?).map_err(|e| corrupt(e.to_string()))?;

    let vocab_len = cur.usize()?;
    if vocab_len != config.vocab_size {
        return Err(corrupt(format!("vocabulary of {vocab_len} tokens for a model of {}", config.vocab_size)));
    }
    let mut tokens = Vec::with_capacity(vocab_len.min(1 << 20));
    for _ in 0..vocab_len {
        let n = cur.u32()? as usize;
        let raw = cur.take(n)?;
        tokens.push(String::from_utf8(raw.to_vec()).map_err(|_| corrupt("vocabulary token is not UTF-8"))?);
    }
    let vocab = Vocabulary::from_tokens(tokens).map_err(|e| corrupt(e.to_string()))?;

    let mut params = ModelParams::zeros(&config);
    let count = cur.usize()?;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(corrupt(format!("{count} tensors, expected {}", slots.len())));
    }
    for (name, slot) in slots.iter_mut() {
        let n = cur.usize()?;
        if n != slot.len() {
            return Err(corrupt(format!("tensor {name} has {n} values, expected {}", slot.len())));
        }
        for x in slot.iter_mut() {
            *x = cur.f64()?;
        }
    }
    drop(slots);
    if cur.pos != cur.buf.len() {
        return Err(corrupt("trailing bytes after tensors"));
    }
    Ok(Checkpoint { params, vocab, fields })
}
