//! Multi-head attention with relative relation encodings.
//!
//! Relation vectors are added to the projected keys and values, so
//! softmax(q (k + e)^T / sqrt(d)) (v + e) holds per head. Two entry
//! points cover the shapes the model needs:
//!
//! * [`attention`]: relations depend on (batch, key) at most, so they are
//!   folded into K and V before a plain batched attention.
//! * [`attention_pairwise`]: relations depend on (query, key) and are
//!   shared across the batch; the extra score and value terms are
//!   computed with reshaped batched matmuls.

use crate::model::params::{Binding, Linear};
use crate::tensor::{Graph, Tensor};

pub struct AttnParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl AttnParams {
    pub fn register(store: &mut crate::model::params::ParamStore, name: &str, d: usize) {
        Linear::register(store, &format!("{name}.wq"), d, d);
        Linear::register(store, &format!("{name}.wk"), d, d);
        Linear::register(store, &format!("{name}.wv"), d, d);
        Linear::register(store, &format!("{name}.wo"), d, d);
    }

    pub fn bind(b: &Binding, name: &str, heads: usize) -> AttnParams {
        AttnParams {
            wq: Linear::bind(b, &format!("{name}.wq")),
            wk: Linear::bind(b, &format!("{name}.wk")),
            wv: Linear::bind(b, &format!("{name}.wv")),
            wo: Linear::bind(b, &format!("{name}.wo")),
            heads,
        }
    }
}

/// (B, L, D) -> (B, h, L, dh)
fn split_heads(x: &Tensor, heads: usize) -> Tensor {
    let sh = x.shape();
    let (b, l, d) = (sh[0], sh[1], sh[2]);
    assert!(d % heads == 0, "hidden dim {d} not divisible by {heads} heads");
    x.reshape(&[b, l, heads, d / heads]).permute(&[0, 2, 1, 3])
}

/// (B, h, L, dh) -> (B, L, D)
fn merge_heads(x: &Tensor) -> Tensor {
    let sh = x.shape();
    let (b, h, l, dh) = (sh[0], sh[1], sh[2], sh[3]);
    x.permute(&[0, 2, 1, 3]).reshape(&[b, l, h * dh])
}

/// Tile a per-key validity mask over (B, h, Lq, Lk). Rows whose keys are
/// all invalid would have nothing to attend to; such configurations are a
/// caller contract violation and panic inside softmax.
fn tile_key_mask(key_valid: &[bool], b: usize, h: usize, lq: usize) -> Vec<bool> {
    let lk = key_valid.len();
    let mut out = Vec::with_capacity(b * h * lq * lk);
    for _ in 0..b * h * lq {
        out.extend_from_slice(key_valid);
    }
    out
}

/// Plain multi-head attention. `key_bias`, when present, is broadcast-added
/// to the projected keys and values (shapes (Lk, D), (1, Lk, D) or
/// (B, Lk, D)); this realizes relation encodings that depend on the key
/// (and possibly the batch) but not on the query.
pub fn attention(
    q_tokens: &Tensor,
    kv_tokens: &Tensor,
    key_bias: Option<&Tensor>,
    key_valid: Option<&[bool]>,
    p: &AttnParams,
) -> Tensor {
    let qsh = q_tokens.shape();
    let (b, lq, d) = (qsh[0], qsh[1], qsh[2]);
    let q = p.wq.forward(q_tokens);
    let mut k = p.wk.forward(kv_tokens);
    let mut v = p.wv.forward(kv_tokens);
    if let Some(e) = key_bias {
        k = k.add(e);
        v = v.add(e);
    }
    let lk = k.shape()[k.shape().len() - 2];
    // Broadcast kv across the batch when it comes in unbatched.
    let (k, v) = if k.shape().len() == 2 {
        (k.reshape(&[1, lk, d]), v.reshape(&[1, lk, d]))
    } else {
        (k, v)
    };
    let qh = split_heads(&q, p.heads);
    let kh = split_heads(&k, p.heads);
    let vh = split_heads(&v, p.heads);
    let scale = 1.0 / (d as f64).sqrt();
    let scores = qh.matmul(&kh.transpose(2, 3)).mul_scalar(scale);
    let mask = key_valid.map(|kv| tile_key_mask(kv, b, p.heads, lq));
    let weights = scores.softmax_lastdim(mask.as_deref());
    let ctx = weights.matmul(&vh);
    p.wo.forward(&merge_heads(&ctx))
}

/// Relative cross-attention with full per-(query, key) relation vectors
/// shared across the batch: rel has shape (Lq, Lk, D).
pub fn attention_pairwise(
    q_tokens: &Tensor,
    kv_tokens: &Tensor,
    rel: &Tensor,
    key_valid: Option<&[bool]>,
    p: &AttnParams,
) -> Tensor {
    let qsh = q_tokens.shape();
    let (b, lq, d) = (qsh[0], qsh[1], qsh[2]);
    let rsh = rel.shape();
    assert_eq!(rsh[0], lq, "relation table query extent mismatch");
    let lk = rsh[1];
    let h = p.heads;
    let dh = d / h;

    let q = p.wq.forward(q_tokens);
    let k = p.wk.forward(kv_tokens);
    let v = p.wv.forward(kv_tokens);
    let k = if k.shape().len() == 2 {
        k.reshape(&[1, lk, d])
    } else {
        k
    };
    let v = if v.shape().len() == 2 {
        v.reshape(&[1, lk, d])
    } else {
        v
    };

    let qh = split_heads(&q, h); // (B, h, Lq, dh)
    let kh = split_heads(&k, h);
    let vh = split_heads(&v, h);
    // (Lq, Lk, D) -> (h, Lq, Lk, dh) -> (h*Lq, Lk, dh)
    let eh = rel
        .reshape(&[lq, lk, h, dh])
        .permute(&[2, 0, 1, 3])
        .reshape(&[h * lq, lk, dh]);

    let scale = 1.0 / (d as f64).sqrt();
    // Base scores q k^T: (B, h, Lq, Lk)
    let scores_k = qh.matmul(&kh.transpose(2, 3));
    // Relation scores q e^T per (query, key): batch over (h, Lq).
    // (B, h, Lq, dh) -> (h, Lq, B, dh) -> (h*Lq, B, dh)
    let q_e = qh
        .permute(&[1, 2, 0, 3])
        .reshape(&[h * lq, b, dh]);
    let scores_e = q_e
        .matmul(&eh.transpose(1, 2)) // (h*Lq, B, Lk)
        .reshape(&[h, lq, b, lk])
        .permute(&[2, 0, 1, 3]); // (B, h, Lq, Lk)
    let scores = scores_k.add(&scores_e).mul_scalar(scale);
    let mask = key_valid.map(|kv| tile_key_mask(kv, b, h, lq));
    let weights = scores.softmax_lastdim(mask.as_deref()); // (B, h, Lq, Lk)

    // Base context w v: (B, h, Lq, dh)
    let ctx_v = weights.matmul(&vh);
    // Relation context w e: batch over (h, Lq) again.
    let w_e = weights
        .permute(&[1, 2, 0, 3])
        .reshape(&[h * lq, b, lk]);
    let ctx_e = w_e
        .matmul(&eh) // (h*Lq, B, dh)
        .reshape(&[h, lq, b, dh])
        .permute(&[2, 0, 1, 3]); // (B, h, Lq, dh)
    let ctx = ctx_v.add(&ctx_e);
    p.wo.forward(&merge_heads(&ctx))
}

/// Sinusoidal embedding of a scalar sequence into `d` dims.
pub fn sinusoid_embedding(g: &Graph, values: &[f64], d: usize) -> Tensor {
    assert!(d % 2 == 0, "sinusoid dim must be even");
    let half = d / 2;
    let mut data = Vec::with_capacity(values.len() * d);
    for &v in values {
        for i in 0..half {
            let omega = 1.0 / 10_000f64.powf(i as f64 / half as f64);
            data.push((v * omega).sin());
            data.push((v * omega).cos());
        }
    }
    g.constant(data, &[values.len(), d])
}
