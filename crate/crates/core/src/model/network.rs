//! Forward pass, loss and hand-derived backward pass.
//!
//! A batch is packed into one matrix holding only the non-PAD positions of
//! every sequence (each keeps its original position for the positional
//! encoding). Because PAD keys are masked and PAD queries never reach the
//! pooled summary, dropping them up front is exact, and it keeps the dense
//! projections as single large matrix products.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::gemm::matmul;
use super::{LayerParams, ModelError, ModelParams};
use crate::tokenizer::{TokenSequence, PAD};

const LN_EPS: f64 = 1e-5;

struct Packed {
    tokens: Vec<usize>,
    /// Row range of each batch item.
    spans: Vec<(usize, usize)>,
    positions: Vec<usize>,
}

fn pack(params: &ModelParams, batch: &[TokenSequence]) -> Result<Packed, ModelError> {
    let cfg = &params.config;
    let mut packed = Packed { tokens: Vec::new(), spans: Vec::with_capacity(batch.len()), positions: Vec::new() };
    for (index, seq) in batch.iter().enumerate() {
        if seq.ids.len() != cfg.seq_len {
            return Err(ModelError::DimensionMismatch { index, expected: cfg.seq_len, got: seq.ids.len() });
        }
        let start = packed.tokens.len();
        for (pos, &id) in seq.ids.iter().enumerate() {
            if id as usize >= cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange { id, vocab_size: cfg.vocab_size });
            }
            if id != PAD {
                packed.tokens.push(id as usize);
                packed.positions.push(pos);
            }
        }
        packed.spans.push((start, packed.tokens.len()));
    }
    Ok(packed)
}

/// Sinusoidal encoding of one position into `row`.
fn positional(pos: usize, row: &mut [f64]) {
    let d = row.len();
    for i in (0..d).step_by(2) {
        let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
        row[i] += angle.sin();
        if i + 1 < d {
            row[i + 1] += angle.cos();
        }
    }
}

fn affine(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = matmul(x, &w.view());
    y += b;
    y
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        Zip::from(xhat.row_mut(r)).and(row).for_each(|h, &v| *h = (v - mean) * rs);
    }
    let mut y = &xhat * gain;
    y += bias;
    (y, LnCache { xhat, rstd })
}

/// Returns dx; accumulates into the gain/bias gradients.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    let (n, d) = dy.dim();
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let mut dx = Array2::zeros((n, d));
    for r in 0..n {
        let g = dxhat.row(r);
        let h = cache.xhat.row(r);
        let mean_g = g.sum() / d as f64;
        let mean_gh = g.dot(&h) / d as f64;
        let rs = cache.rstd[r];
        Zip::from(dx.row_mut(r)).and(g).and(h).for_each(|o, &gv, &hv| *o = rs * (gv - mean_g - hv * mean_gh));
    }
    dx
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Inverted-dropout mask, or `None` when dropout is off.
fn dropout_mask(rng: Option<&mut ChaCha8Rng>, p: f64, shape: (usize, usize)) -> Option<Array2<f64>> {
    let rng = rng?;
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < p { 0.0 } else { keep }))
}

struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights per (item, head), item-major.
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    drop_attn: Option<Array2<f64>>,
    ln1: LnCache,
    y: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
    drop_ffn: Option<Array2<f64>>,
    ln2: LnCache,
}

fn layer_forward(
    lp: &LayerParams,
    x: Array2<f64>,
    spans: &[(usize, usize)],
    heads: usize,
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, LayerCache) {
    let (n, d) = x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = affine(&x.view(), &lp.wq, &lp.bq);
    let k = affine(&x.view(), &lp.wk, &lp.bk);
    let v = affine(&x.view(), &lp.wv, &lp.bv);

    let mut attn = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(spans.len() * heads);
    for &(r0, r1) in spans {
        for h in 0..heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let qh = q.slice(s![r0..r1, c0..c1]);
            let kh = k.slice(s![r0..r1, c0..c1]);
            let mut scores = matmul(&qh, &kh.t());
            scores *= scale;
            softmax_rows(&mut scores);
            attn.slice_mut(s![r0..r1, c0..c1]).assign(&matmul(&scores.view(), &v.slice(s![r0..r1, c0..c1])));
            probs.push(scores);
        }
    }

    let mut out = affine(&attn.view(), &lp.wo, &lp.bo);
    let drop_attn = dropout_mask(rng.as_deref_mut(), dropout, (n, d));
    if let Some(m) = &drop_attn {
        out *= m;
    }
    out += &x;
    let (y, ln1) = layer_norm(&out, &lp.ln1_gain, &lp.ln1_bias);

    let hidden_pre = affine(&y.view(), &lp.w1, &lp.b1);
    let hidden = hidden_pre.mapv(|v| v.max(0.0));
    let mut ffn = affine(&hidden.view(), &lp.w2, &lp.b2);
    let drop_ffn = dropout_mask(rng, dropout, (n, d));
    if let Some(m) = &drop_ffn {
        ffn *= m;
    }
    ffn += &y;
    let (z, ln2) = layer_norm(&ffn, &lp.ln2_gain, &lp.ln2_bias);
    (z, LayerCache { x, q, k, v, probs, attn, drop_attn, ln1, y, hidden_pre, hidden, drop_ffn, ln2 })
}

/// Returns dL/dx for the layer input; accumulates weight gradients.
fn layer_backward(
    lp: &LayerParams,
    grad: &mut LayerParams,
    c: &LayerCache,
    dz: &Array2<f64>,
    spans: &[(usize, usize)],
    heads: usize,
) -> Array2<f64> {
    let (n, d) = dz.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let dr2 = layer_norm_backward(dz, &c.ln2, &lp.ln2_gain, &mut grad.ln2_gain, &mut grad.ln2_bias);
    let mut dy = dr2.clone();
    let mut dffn = dr2;
    if let Some(m) = &c.drop_ffn {
        dffn *= m;
    }
    grad.w2 += &matmul(&c.hidden.t(), &dffn.view());
    grad.b2 += &dffn.sum_axis(Axis(0));
    let mut dhidden = matmul(&dffn.view(), &lp.w2.t());
    Zip::from(&mut dhidden).and(&c.hidden_pre).for_each(|g, &pre| {
        if pre <= 0.0 {
            *g = 0.0;
        }
    });
    grad.w1 += &matmul(&c.y.t(), &dhidden.view());
    grad.b1 += &dhidden.sum_axis(Axis(0));
    dy += &matmul(&dhidden.view(), &lp.w1.t());

    let dr1 = layer_norm_backward(&dy, &c.ln1, &lp.ln1_gain, &mut grad.ln1_gain, &mut grad.ln1_bias);
    let mut dx = dr1.clone();
    let mut dout = dr1;
    if let Some(m) = &c.drop_attn {
        dout *= m;
    }
    grad.wo += &matmul(&c.attn.t(), &dout.view());
    grad.bo += &dout.sum_axis(Axis(0));
    let dattn = matmul(&dout.view(), &lp.wo.t());

    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    let mut probs = c.probs.iter();
    for &(r0, r1) in spans {
        for h in 0..heads {
            let p = probs.next().expect("one attention map per item and head");
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let da = dattn.slice(s![r0..r1, c0..c1]);
            let vh = c.v.slice(s![r0..r1, c0..c1]);
            let mut dscores = matmul(&da, &vh.t());
            dv.slice_mut(s![r0..r1, c0..c1]).assign(&matmul(&p.t(), &da));
            for (mut ds_row, p_row) in dscores.rows_mut().into_iter().zip(p.rows()) {
                let dot = ds_row.dot(&p_row);
                Zip::from(&mut ds_row).and(&p_row).for_each(|g, &pv| *g = pv * (*g - dot) * scale);
            }
            dq.slice_mut(s![r0..r1, c0..c1]).assign(&matmul(&dscores.view(), &c.k.slice(s![r0..r1, c0..c1])));
            dk.slice_mut(s![r0..r1, c0..c1]).assign(&matmul(&dscores.t(), &c.q.slice(s![r0..r1, c0..c1])));
        }
    }

    let xt = c.x.t();
    grad.wq += &matmul(&xt, &dq.view());
    grad.wk += &matmul(&xt, &dk.view());
    grad.wv += &matmul(&xt, &dv.view());
    grad.bq += &dq.sum_axis(Axis(0));
    grad.bk += &dk.sum_axis(Axis(0));
    grad.bv += &dv.sum_axis(Axis(0));
    dx += &matmul(&dq.view(), &lp.wq.t());
    dx += &matmul(&dk.view(), &lp.wk.t());
    dx += &matmul(&dv.view(), &lp.wv.t());
    dx
}

struct Activations {
    packed: Packed,
    layers: Vec<LayerCache>,
    pooled: Array2<f64>,
    head_pre: Array2<f64>,
    head_act: Array2<f64>,
    logits: Array2<f64>,
}

fn run_forward(
    params: &ModelParams,
    batch: &[TokenSequence],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Activations, ModelError> {
    let cfg = &params.config;
    let packed = pack(params, batch)?;
    let d = cfg.embed_dim;
    let emb_scale = (d as f64).sqrt();
    let n = packed.tokens.len();

    let mut x = Array2::zeros((n, d));
    for (r, (&tok, &pos)) in packed.tokens.iter().zip(&packed.positions).enumerate() {
        let mut row = x.row_mut(r);
        row.assign(&params.embedding.row(tok));
        row *= emb_scale;
        positional(pos, row.as_slice_mut().expect("row-major"));
    }

    let mut caches = Vec::with_capacity(cfg.num_layers);
    for lp in &params.layers {
        let (z, cache) = layer_forward(lp, x, &packed.spans, cfg.num_heads, cfg.dropout, rng.as_deref_mut());
        caches.push(cache);
        x = z;
    }

    let mut pooled = Array2::zeros((batch.len(), d));
    for (i, &(r0, r1)) in packed.spans.iter().enumerate() {
        if r1 > r0 {
            pooled.row_mut(i).assign(&x.slice(s![r0..r1, ..]).mean_axis(Axis(0)).expect("non-empty span"));
        }
    }
    let head_pre = affine(&pooled.view(), &params.head_w1, &params.head_b1);
    let head_act = head_pre.mapv(|v| v.max(0.0));
    let logits = affine(&head_act.view(), &params.head_w2, &params.head_b2);
    Ok(Activations { packed, layers: caches, pooled, head_pre, head_act, logits })
}

fn run_backward(params: &ModelParams, acts: &Activations, dlogits: &Array2<f64>) -> ModelParams {
    let cfg = &params.config;
    let mut grad = ModelParams::zeros(cfg);
    grad.head_w2 = matmul(&acts.head_act.t(), &dlogits.view());
    grad.head_b2 = dlogits.sum_axis(Axis(0));
    let mut dhead = matmul(&dlogits.view(), &params.head_w2.t());
    Zip::from(&mut dhead).and(&acts.head_pre).for_each(|g, &pre| {
        if pre <= 0.0 {
            *g = 0.0;
        }
    });
    grad.head_w1 = matmul(&acts.pooled.t(), &dhead.view());
    grad.head_b1 = dhead.sum_axis(Axis(0));
    let dpooled = matmul(&dhead.view(), &params.head_w1.t());

    let n = acts.packed.tokens.len();
    let mut dx = Array2::zeros((n, cfg.embed_dim));
    for (i, &(r0, r1)) in acts.packed.spans.iter().enumerate() {
        if r1 > r0 {
            let share = &dpooled.row(i) / (r1 - r0) as f64;
            for r in r0..r1 {
                dx.row_mut(r).assign(&share);
            }
        }
    }
    for (li, (lp, cache)) in params.layers.iter().zip(&acts.layers).enumerate().rev() {
        dx = layer_backward(lp, &mut grad.layers[li], cache, &dx, &acts.packed.spans, cfg.num_heads);
    }

    let emb_scale = (cfg.embed_dim as f64).sqrt();
    for (r, &tok) in acts.packed.tokens.iter().enumerate() {
        grad.embedding.row_mut(tok).scaled_add(emb_scale, &dx.row(r));
    }
    grad
}

/// Evaluation-mode outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `batch × 2`: pass, fail.
    pub logits: Array2<f64>,
    /// `batch × d` masked mean of the final encoder states.
    pub pooled: Array2<f64>,
}

/// Evaluation-mode forward pass (dropout off).
pub fn forward(params: &ModelParams, batch: &[TokenSequence]) -> Result<ForwardOutput, ModelError> {
    let acts = run_forward(params, batch, None)?;
    Ok(ForwardOutput { logits: acts.logits, pooled: acts.pooled })
}

/// Mean cross-entropy and its gradient; `labels` are 0 = pass, 1 = fail.
///
/// With `weights`, item `i` contributes `weights[labels[i]] · CE_i / batch`.
fn loss_from_logits(
    logits: &Array2<f64>,
    labels: &[usize],
    weights: Option<[f64; 2]>,
) -> (f64, Array2<f64>) {
    let b = logits.nrows() as f64;
    let mut dlogits = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        let w = weights.map_or(1.0, |ws| ws[y]);
        let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += w * (lse - row[y]);
        for c in 0..row.len() {
            let p = (row[c] - lse).exp();
            dlogits[[i, c]] = w * (p - if c == y { 1.0 } else { 0.0 }) / b;
        }
    }
    (loss / b, dlogits)
}

/// Evaluation-mode loss and gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &[TokenSequence],
    labels: &[usize],
    weights: Option<[f64; 2]>,
) -> Result<(f64, ModelParams), ModelError> {
    loss_and_grad_with(params, batch, labels, weights, None)
}

pub(crate) fn loss_and_grad_with(
    params: &ModelParams,
    batch: &[TokenSequence],
    labels: &[usize],
    weights: Option<[f64; 2]>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, ModelParams), ModelError> {
    if labels.len() != batch.len() {
        return Err(ModelError::LabelMismatch { batch: batch.len(), labels: labels.len() });
    }
    let acts = run_forward(params, batch, rng)?;
    let (loss, dlogits) = loss_from_logits(&acts.logits, labels, weights);
    Ok((loss, run_backward(params, &acts, &dlogits)))
}
